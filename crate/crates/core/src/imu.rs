//! IMU pre-integration between frame timestamps, state prediction, and the
//! 15-dimensional IMU error.
//!
//! Pre-integrated quantities live in the body frame `S^k` of the first state:
//! `ΔR` rotates `S^t` into `S^k`, `Δv`/`Δp` integrate bias-corrected specific
//! force. Their error state is ordered `[δφ, δv, δp, δb_g, δb_a]`, with `δφ` a
//! left perturbation of `ΔR`. Integration uses the midpoint rule between
//! consecutive samples, and composition of two pre-integrals is exact, so
//! integrating a batch equals appending its pieces.

use nalgebra::{Cholesky, Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_minus, exp, left_jacobian, left_jacobian_inv, skew, Pose, Quat};
use crate::FrameId;

pub type Vector15 = SVector<f64, 15>;
pub type Matrix15 = SMatrix<f64, 15, 15>;

/// Covariance condition number above which the information is regularized.
const MAX_CONDITION: f64 = 1e12;
const REGULARIZATION: f64 = 1e-12;

/// Navigation state `x = [r_WS, q_WS, v_W, b_g, b_a]`.
///
/// Perturbations are 15-vectors `[δr, δα, δv, δb_g, δb_a]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub r: Vector3<f64>,
    pub q: Quat,
    pub v: Vector3<f64>,
    pub bg: Vector3<f64>,
    pub ba: Vector3<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            r: Vector3::zeros(),
            q: Quat::identity(),
            v: Vector3::zeros(),
            bg: Vector3::zeros(),
            ba: Vector3::zeros(),
        }
    }
}

impl NavState {
    pub fn pose(&self) -> Pose {
        Pose { r: self.r, q: self.q }
    }

    pub fn set_pose(&mut self, p: &Pose) {
        self.r = p.r;
        self.q = p.q;
    }

    pub fn box_plus(&self, d: &Vector15) -> NavState {
        NavState {
            r: self.r + d.fixed_rows::<3>(0),
            q: crate::geometry::box_plus(&self.q, &d.fixed_rows::<3>(3).into_owned()),
            v: self.v + d.fixed_rows::<3>(6),
            bg: self.bg + d.fixed_rows::<3>(9),
            ba: self.ba + d.fixed_rows::<3>(12),
        }
    }

    pub fn box_minus(&self, other: &NavState) -> Vector15 {
        let mut d = Vector15::zeros();
        d.fixed_rows_mut::<3>(0).copy_from(&(self.r - other.r));
        d.fixed_rows_mut::<3>(3).copy_from(&box_minus(&self.q, &other.q));
        d.fixed_rows_mut::<3>(6).copy_from(&(self.v - other.v));
        d.fixed_rows_mut::<3>(9).copy_from(&(self.bg - other.bg));
        d.fixed_rows_mut::<3>(12).copy_from(&(self.ba - other.ba));
        d
    }

    /// Applies a rigid world-frame transform to position, orientation and velocity.
    pub fn transformed(&self, t: &Pose) -> NavState {
        NavState {
            r: t.transform(&self.r),
            q: crate::geometry::normalized((t.q * self.q).into_inner()),
            v: t.q * self.v,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let s = (t - a.t) / (b.t - a.t);
        ImuSample {
            t,
            gyro: a.gyro + (b.gyro - a.gyro) * s,
            accel: a.accel + (b.accel - a.accel) * s,
        }
    }
}

/// Noise densities and gravity. Gravity points along `-z` of the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuParams {
    /// Gyro noise density [rad/s/√Hz].
    pub sigma_g: f64,
    /// Accelerometer noise density [m/s²/√Hz].
    pub sigma_a: f64,
    /// Gyro bias random walk [rad/s²/√Hz].
    pub sigma_bg: f64,
    /// Accelerometer bias random walk [m/s³/√Hz].
    pub sigma_ba: f64,
    pub g: f64,
    /// Nominal sample rate [Hz].
    pub rate: f64,
}

impl Default for ImuParams {
    fn default() -> Self {
        Self {
            sigma_g: 1e-3,
            sigma_a: 1e-2,
            sigma_bg: 1e-5,
            sigma_ba: 1e-4,
            g: 9.81,
            rate: 200.0,
        }
    }
}

impl ImuParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_g, self.sigma_a, self.sigma_bg, self.sigma_ba, self.g, self.rate];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config("IMU parameters must be positive".into()))
        }
    }

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.g)
    }
}

/// Relative-motion pseudo-measurement between two frame timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreintegratedImu {
    pub t_start: f64,
    pub dt: f64,
    pub delta_q: Quat,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub bg_lin: Vector3<f64>,
    pub ba_lin: Vector3<f64>,
    pub d_phi_d_bg: Matrix3<f64>,
    pub d_v_d_bg: Matrix3<f64>,
    pub d_v_d_ba: Matrix3<f64>,
    pub d_p_d_bg: Matrix3<f64>,
    pub d_p_d_ba: Matrix3<f64>,
    /// Covariance of `[δφ, δv, δp, δb_g, δb_a]`.
    pub covariance: Matrix15,
    /// Inverse of the (possibly regularized) covariance.
    pub information: Matrix15,
    /// Lower Cholesky factor `L` with `information = L Lᵀ`.
    pub sqrt_information: Matrix15,
}

impl PreintegratedImu {
    pub fn identity(t_start: f64, bg_lin: Vector3<f64>, ba_lin: Vector3<f64>) -> Self {
        let mut p = Self {
            t_start,
            dt: 0.0,
            delta_q: Quat::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            bg_lin,
            ba_lin,
            d_phi_d_bg: Matrix3::zeros(),
            d_v_d_bg: Matrix3::zeros(),
            d_v_d_ba: Matrix3::zeros(),
            d_p_d_bg: Matrix3::zeros(),
            d_p_d_ba: Matrix3::zeros(),
            covariance: Matrix15::zeros(),
            information: Matrix15::zeros(),
            sqrt_information: Matrix15::zeros(),
        };
        p.update_information();
        p
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.dt
    }

    /// Midpoint step between two consecutive samples, starting from identity.
    fn step(s0: &ImuSample, s1: &ImuSample, params: &ImuParams, bg: &Vector3<f64>, ba: &Vector3<f64>) -> Self {
        let dt = s1.t - s0.t;
        let omega = 0.5 * (s0.gyro + s1.gyro) - bg;
        let theta = omega * dt;
        let dq = exp(&theta);
        let dr = dq.to_rotation_matrix().into_inner();
        let jl = left_jacobian(&theta);
        let a0 = s0.accel - ba;
        let a1 = dr * (s1.accel - ba);
        let a_mid = 0.5 * (a0 + a1);

        let d_phi_d_bg = -jl * dt;
        let d_v_d_bg = 0.5 * dt * dt * skew(&a1) * jl;
        let d_v_d_ba = -0.5 * dt * (Matrix3::identity() + dr);

        let mut p = Self::identity(s0.t, *bg, *ba);
        p.dt = dt;
        p.delta_q = dq;
        p.delta_v = a_mid * dt;
        p.delta_p = 0.5 * a_mid * dt * dt;
        p.d_phi_d_bg = d_phi_d_bg;
        p.d_v_d_bg = d_v_d_bg;
        p.d_v_d_ba = d_v_d_ba;
        p.d_p_d_bg = 0.5 * dt * d_v_d_bg;
        p.d_p_d_ba = 0.5 * dt * d_v_d_ba;

        // Sensor noise enters the step exactly like a bias offset.
        let mut b = SMatrix::<f64, 9, 6>::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.d_phi_d_bg);
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&p.d_v_d_bg);
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&p.d_v_d_ba);
        b.fixed_view_mut::<3, 3>(6, 0).copy_from(&p.d_p_d_bg);
        b.fixed_view_mut::<3, 3>(6, 3).copy_from(&p.d_p_d_ba);
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        if dt > 0.0 {
            for i in 0..3 {
                q[(i, i)] = params.sigma_g * params.sigma_g / dt;
                q[(i + 3, i + 3)] = params.sigma_a * params.sigma_a / dt;
            }
        }
        let mut cov = Matrix15::zeros();
        cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&(b * q * b.transpose()));
        for i in 9..12 {
            cov[(i, i)] = params.sigma_bg * params.sigma_bg * dt;
            cov[(i + 3, i + 3)] = params.sigma_ba * params.sigma_ba * dt;
        }
        p.covariance = cov;
        p
    }

    /// Composes `self` (covering `[t_k, t_m]`) with `later` (covering `[t_m, t_n]`).
    /// Both must share the bias linearization point.
    fn compose(&self, later: &PreintegratedImu) -> PreintegratedImu {
        let ra = self.delta_q.to_rotation_matrix().into_inner();
        let dt_b = later.dt;
        let rav = ra * later.delta_v;
        let rap = ra * later.delta_p;

        let mut g_a = Matrix15::identity();
        g_a.fixed_view_mut::<3, 3>(0, 9).copy_from(&(ra * later.d_phi_d_bg));
        g_a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&rav)));
        g_a.fixed_view_mut::<3, 3>(3, 9).copy_from(&(ra * later.d_v_d_bg));
        g_a.fixed_view_mut::<3, 3>(3, 12).copy_from(&(ra * later.d_v_d_ba));
        g_a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-skew(&rap)));
        g_a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt_b));
        g_a.fixed_view_mut::<3, 3>(6, 9).copy_from(&(ra * later.d_p_d_bg));
        g_a.fixed_view_mut::<3, 3>(6, 12).copy_from(&(ra * later.d_p_d_ba));
        let mut g_b = Matrix15::identity();
        for k in 0..3 {
            g_b.fixed_view_mut::<3, 3>(3 * k, 3 * k).copy_from(&ra);
        }

        let mut out = self.clone();
        out.dt = self.dt + dt_b;
        out.delta_q = crate::geometry::normalized((self.delta_q * later.delta_q).into_inner());
        out.delta_v = self.delta_v + rav;
        out.delta_p = self.delta_p + self.delta_v * dt_b + rap;
        out.d_phi_d_bg = self.d_phi_d_bg + ra * later.d_phi_d_bg;
        out.d_v_d_bg = self.d_v_d_bg - skew(&rav) * self.d_phi_d_bg + ra * later.d_v_d_bg;
        out.d_v_d_ba = self.d_v_d_ba + ra * later.d_v_d_ba;
        out.d_p_d_bg =
            self.d_p_d_bg + self.d_v_d_bg * dt_b - skew(&rap) * self.d_phi_d_bg + ra * later.d_p_d_bg;
        out.d_p_d_ba = self.d_p_d_ba + self.d_v_d_ba * dt_b + ra * later.d_p_d_ba;
        out.covariance = g_a * self.covariance * g_a.transpose() + g_b * later.covariance * g_b.transpose();
        out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
        out
    }

    /// Appends a later pre-integral and recomputes the information matrix.
    pub fn append(&self, later: &PreintegratedImu) -> Result<PreintegratedImu> {
        if (self.t_end() - later.t_start).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "pre-integrals are not contiguous ({} vs {})",
                self.t_end(),
                later.t_start
            )));
        }
        if (self.bg_lin - later.bg_lin).norm() > 1e-12 || (self.ba_lin - later.ba_lin).norm() > 1e-12 {
            return Err(Error::InvalidInput("pre-integrals use different bias linearization points".into()));
        }
        let mut out = self.compose(later);
        out.update_information();
        Ok(out)
    }

    fn update_information(&mut self) {
        let cov = self.covariance;
        let eig = SymmetricEigen::new(cov);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let ill = !(min > 0.0) || max / min > MAX_CONDITION;
        let reg = if ill { cov + Matrix15::identity() * REGULARIZATION } else { cov };
        let info = match Cholesky::new(reg) {
            Some(c) => c.inverse(),
            None => {
                let c = Cholesky::new(cov + Matrix15::identity() * REGULARIZATION.max(max * 1e-12))
                    .expect("regularized covariance is positive definite");
                c.inverse()
            }
        };
        let info = 0.5 * (info + info.transpose());
        self.sqrt_information = Cholesky::new(info)
            .map(|c| c.l())
            .unwrap_or_else(|| {
                let e = SymmetricEigen::new(info);
                let d = e.eigenvalues.map(|v| v.max(0.0).sqrt());
                e.eigenvectors * Matrix15::from_diagonal(&d)
            });
        self.information = info;
    }

    /// Pre-integral terms corrected to first order for biases `(bg, ba)`.
    pub fn corrected(&self, bg: &Vector3<f64>, ba: &Vector3<f64>) -> (Quat, Vector3<f64>, Vector3<f64>) {
        let dbg = bg - self.bg_lin;
        let dba = ba - self.ba_lin;
        let dq = exp(&(self.d_phi_d_bg * dbg)) * self.delta_q;
        let dv = self.delta_v + self.d_v_d_bg * dbg + self.d_v_d_ba * dba;
        let dp = self.delta_p + self.d_p_d_bg * dbg + self.d_p_d_ba * dba;
        (dq, dv, dp)
    }
}

/// Pre-integrates a batch of samples spanning `[samples[0].t, samples.last().t]`.
pub fn preintegrate(
    samples: &[ImuSample],
    params: &ImuParams,
    bg_lin: &Vector3<f64>,
    ba_lin: &Vector3<f64>,
) -> Result<PreintegratedImu> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("no IMU samples to pre-integrate".into()))?;
    for w in samples.windows(2) {
        if !(w[1].t > w[0].t) {
            return Err(Error::InvalidInput(format!(
                "IMU timestamps not strictly increasing at t = {}",
                w[1].t
            )));
        }
    }
    let mut acc = PreintegratedImu::identity(first.t, *bg_lin, *ba_lin);
    for w in samples.windows(2) {
        let s = PreintegratedImu::step(&w[0], &w[1], params, bg_lin, ba_lin);
        acc = acc.compose(&s);
    }
    acc.update_information();
    Ok(acc)
}

/// Samples covering exactly `[t0, t1]`: boundary samples are linearly
/// interpolated from the measurements straddling each timestamp.
pub fn samples_between(samples: &[ImuSample], t0: f64, t1: f64) -> Result<Vec<ImuSample>> {
    if !(t1 >= t0) {
        return Err(Error::InvalidInput(format!("bad interval [{t0}, {t1}]")));
    }
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return Err(Error::InvalidInput("no IMU samples".into()));
    };
    const EPS: f64 = 1e-9;
    if first.t > t0 + EPS || last.t < t1 - EPS {
        return Err(Error::InvalidInput(format!(
            "IMU samples [{}, {}] do not cover [{t0}, {t1}]",
            first.t, last.t
        )));
    }
    let at = |t: f64| -> ImuSample {
        let idx = samples.partition_point(|s| s.t < t);
        if idx < samples.len() && (samples[idx].t - t).abs() <= EPS {
            ImuSample { t, ..samples[idx] }
        } else if idx == 0 {
            ImuSample { t, ..samples[0] }
        } else if idx >= samples.len() {
            ImuSample { t, ..samples[samples.len() - 1] }
        } else {
            ImuSample::lerp(&samples[idx - 1], &samples[idx], t)
        }
    };
    let mut out = vec![at(t0)];
    if t1 - t0 > EPS {
        out.extend(samples.iter().filter(|s| s.t > t0 + EPS && s.t < t1 - EPS).copied());
        out.push(at(t1));
    }
    Ok(out)
}

/// Predicted state at the end of the pre-integral, starting from `x_k`.
pub fn predict(x_k: &NavState, pre: &PreintegratedImu, params: &ImuParams) -> NavState {
    if pre.dt == 0.0 {
        return *x_k;
    }
    let g = params.gravity();
    let dt = pre.dt;
    let (dq, dv, dp) = pre.corrected(&x_k.bg, &x_k.ba);
    let rk = x_k.q.to_rotation_matrix().into_inner();
    NavState {
        r: x_k.r + x_k.v * dt + 0.5 * g * dt * dt + rk * dp,
        q: crate::geometry::normalized((x_k.q * dq).into_inner()),
        v: x_k.v + g * dt + rk * dv,
        bg: x_k.bg,
        ba: x_k.ba,
    }
}

/// IMU error `x̂ⁿ(xᵏ) ⊟ xⁿ` in the order `[r, q, v, b_g, b_a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuErrorEval {
    pub error: Vector15,
    pub j_k: Matrix15,
    pub j_n: Matrix15,
    /// World-frame weight `W_s`; the cost is `½ eᵀ W_s e`.
    pub weight: Matrix15,
}

struct Linearization {
    error: Vector15,
    j_k: Matrix15,
    j_n: Matrix15,
    rk: Matrix3<f64>,
}

fn linearize(x_k: &NavState, x_n: &NavState, pre: &PreintegratedImu, params: &ImuParams) -> Linearization {
    let g = params.gravity();
    let dt = pre.dt;
    let dbg = x_k.bg - pre.bg_lin;
    let (dq, dv, dp) = pre.corrected(&x_k.bg, &x_k.ba);
    let rk = x_k.q.to_rotation_matrix().into_inner();
    let q_hat = x_k.q * dq;
    let r_hat = x_k.r + x_k.v * dt + 0.5 * g * dt * dt + rk * dp;
    let v_hat = x_k.v + g * dt + rk * dv;

    let e_r = r_hat - x_n.r;
    let e_q = box_minus(&q_hat, &x_n.q);
    let e_v = v_hat - x_n.v;
    let mut error = Vector15::zeros();
    error.fixed_rows_mut::<3>(0).copy_from(&e_r);
    error.fixed_rows_mut::<3>(3).copy_from(&e_q);
    error.fixed_rows_mut::<3>(6).copy_from(&e_v);
    error.fixed_rows_mut::<3>(9).copy_from(&(x_k.bg - x_n.bg));
    error.fixed_rows_mut::<3>(12).copy_from(&(x_k.ba - x_n.ba));

    let jl_inv = left_jacobian_inv(&e_q);
    let i3 = Matrix3::identity();
    let mut j_k = Matrix15::zeros();
    // position
    j_k.fixed_view_mut::<3, 3>(0, 0).copy_from(&i3);
    j_k.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&(rk * dp))));
    j_k.fixed_view_mut::<3, 3>(0, 6).copy_from(&(i3 * dt));
    j_k.fixed_view_mut::<3, 3>(0, 9).copy_from(&(rk * pre.d_p_d_bg));
    j_k.fixed_view_mut::<3, 3>(0, 12).copy_from(&(rk * pre.d_p_d_ba));
    // orientation
    j_k.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    let phi_b = pre.d_phi_d_bg * dbg;
    j_k.fixed_view_mut::<3, 3>(3, 9)
        .copy_from(&(jl_inv * rk * left_jacobian(&phi_b) * pre.d_phi_d_bg));
    // velocity
    j_k.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-skew(&(rk * dv))));
    j_k.fixed_view_mut::<3, 3>(6, 6).copy_from(&i3);
    j_k.fixed_view_mut::<3, 3>(6, 9).copy_from(&(rk * pre.d_v_d_bg));
    j_k.fixed_view_mut::<3, 3>(6, 12).copy_from(&(rk * pre.d_v_d_ba));
    // biases
    j_k.fixed_view_mut::<3, 3>(9, 9).copy_from(&i3);
    j_k.fixed_view_mut::<3, 3>(12, 12).copy_from(&i3);

    let mut j_n = -Matrix15::identity();
    let r_err = exp(&e_q).to_rotation_matrix().into_inner();
    j_n.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jl_inv * r_err));

    Linearization { error, j_k, j_n, rk }
}

/// Maps the error from `[r, q, v, b_g, b_a]` (world) to pre-integral order `[φ, v, p, b_g, b_a]` (body).
fn to_body(rk: &Matrix3<f64>) -> Matrix15 {
    let rt = rk.transpose();
    let mut m = Matrix15::zeros();
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&rt);
    m.fixed_view_mut::<3, 3>(3, 6).copy_from(&rt);
    m.fixed_view_mut::<3, 3>(6, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 3>(9, 9).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(12, 12).copy_from(&Matrix3::identity());
    m
}

pub fn imu_error(x_k: &NavState, x_n: &NavState, pre: &PreintegratedImu, params: &ImuParams) -> ImuErrorEval {
    let lin = linearize(x_k, x_n, pre, params);
    let m = to_body(&lin.rk);
    ImuErrorEval {
        error: lin.error,
        j_k: lin.j_k,
        j_n: lin.j_n,
        weight: m.transpose() * pre.information * m,
    }
}

/// Whitened residual `Lᵀ Mᵀ e` with `½‖·‖² = ½ eᵀ W_s e`, and its exact Jacobians
/// (including the dependence of the weight on the orientation of `x_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImuResidual {
    pub residual: Vector15,
    pub j_k: Matrix15,
    pub j_n: Matrix15,
}

pub fn imu_residual(x_k: &NavState, x_n: &NavState, pre: &PreintegratedImu, params: &ImuParams) -> ImuResidual {
    let lin = linearize(x_k, x_n, pre, params);
    let m = to_body(&lin.rk);
    let e_body = m * lin.error;
    let mut j_k = m * lin.j_k;
    let rt = lin.rk.transpose();
    // d(Rᵀ u)/dδα_k = Rᵀ [u]×
    let blocks = [(0usize, 3usize), (3, 6), (6, 0)];
    for (body_row, world_row) in blocks {
        let u = lin.error.fixed_rows::<3>(world_row).into_owned();
        let mut blk = j_k.fixed_view_mut::<3, 3>(body_row, 3);
        blk += rt * skew(&u);
    }
    let j_n = m * lin.j_n;
    let lt = pre.sqrt_information.transpose();
    ImuResidual {
        residual: lt * e_body,
        j_k: lt * j_k,
        j_n: lt * j_n,
    }
}

/// IMU factor between two consecutive states, keeping the raw samples so the
/// interval can be re-integrated when states are merged or biases move.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuFactor {
    pub from: FrameId,
    pub to: FrameId,
    pub samples: Vec<ImuSample>,
    pub preint: PreintegratedImu,
}

impl ImuFactor {
    pub fn new(
        from: FrameId,
        to: FrameId,
        samples: Vec<ImuSample>,
        params: &ImuParams,
        bg: &Vector3<f64>,
        ba: &Vector3<f64>,
    ) -> Result<Self> {
        let preint = preintegrate(&samples, params, bg, ba)?;
        Ok(Self {
            from,
            to,
            samples,
            preint,
        })
    }

    /// Re-integrates at a new bias linearization point.
    pub fn repropagate(&mut self, params: &ImuParams, bg: &Vector3<f64>, ba: &Vector3<f64>) -> Result<()> {
        self.preint = preintegrate(&self.samples, params, bg, ba)?;
        Ok(())
    }

    /// Joins `self` (a→b) with `next` (b→c) into a single a→c factor.
    pub fn merge(&self, next: &ImuFactor, params: &ImuParams, bg: &Vector3<f64>, ba: &Vector3<f64>) -> Result<Self> {
        if self.to != next.from {
            return Err(Error::InvalidInput("IMU factors are not consecutive".into()));
        }
        let mut samples = self.samples.clone();
        samples.extend(next.samples.iter().skip(1).copied());
        ImuFactor::new(self.from, next.to, samples, params, bg, ba)
    }
}
