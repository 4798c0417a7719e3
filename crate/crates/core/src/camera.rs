//! Pinhole cameras with optional lens distortion, multi-camera rigs, and the
//! reprojection error with analytic Jacobians.

use nalgebra::{Matrix2, Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{skew, Pose};
use crate::{FrameId, LandmarkId};

/// Minimum depth along the optical axis for a valid projection [m].
pub const MIN_DEPTH: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Distortion {
    #[default]
    None,
    RadialTangential { k1: f64, k2: f64, p1: f64, p2: f64 },
    Equidistant { k1: f64, k2: f64, k3: f64, k4: f64 },
}

impl Distortion {
    /// Distorts normalized image coordinates; returns the point and its 2×2 Jacobian.
    pub fn distort(&self, x: &Vector2<f64>) -> (Vector2<f64>, Matrix2<f64>) {
        match *self {
            Distortion::None => (*x, Matrix2::identity()),
            Distortion::RadialTangential { k1, k2, p1, p2 } => {
                let (u, v) = (x.x, x.y);
                let r2 = u * u + v * v;
                let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
                let dradial = 2.0 * (k1 + 2.0 * k2 * r2);
                let xd = u * radial + 2.0 * p1 * u * v + p2 * (r2 + 2.0 * u * u);
                let yd = v * radial + p1 * (r2 + 2.0 * v * v) + 2.0 * p2 * u * v;
                let j = Matrix2::new(
                    radial + u * u * dradial + 2.0 * p1 * v + 6.0 * p2 * u,
                    u * v * dradial + 2.0 * p1 * u + 2.0 * p2 * v,
                    u * v * dradial + 2.0 * p1 * u + 2.0 * p2 * v,
                    radial + v * v * dradial + 6.0 * p1 * v + 2.0 * p2 * u,
                );
                (Vector2::new(xd, yd), j)
            }
            Distortion::Equidistant { k1, k2, k3, k4 } => {
                let r = x.norm();
                if r < 1e-10 {
                    return (*x, Matrix2::identity());
                }
                let theta = r.atan();
                let t2 = theta * theta;
                let poly = 1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)));
                let theta_d = theta * poly;
                let dtheta_d = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)));
                let dtheta_dr = 1.0 / (1.0 + r * r);
                let scale = theta_d / r;
                let dscale_dr = (dtheta_d * dtheta_dr * r - theta_d) / (r * r);
                let j = Matrix2::identity() * scale + (x * x.transpose()) * (dscale_dr / r);
                (x * scale, j)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProjectionError {
    #[error("point is behind the camera")]
    BehindCamera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub distortion: Distortion,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fu: 400.0,
            fv: 400.0,
            cu: 320.0,
            cv: 240.0,
            width: 640,
            height: 480,
            distortion: Distortion::None,
        }
    }
}

impl CameraModel {
    /// Projects a point in camera coordinates to pixels, with `d uv / d p_C`.
    pub fn project(
        &self,
        p_c: &Vector3<f64>,
    ) -> std::result::Result<(Vector2<f64>, Matrix2x3<f64>), ProjectionError> {
        if p_c.z <= MIN_DEPTH {
            return Err(ProjectionError::BehindCamera);
        }
        let inv_z = 1.0 / p_c.z;
        let xn = Vector2::new(p_c.x * inv_z, p_c.y * inv_z);
        let jn = Matrix2x3::new(
            inv_z,
            0.0,
            -p_c.x * inv_z * inv_z,
            0.0,
            inv_z,
            -p_c.y * inv_z * inv_z,
        );
        let (xd, jd) = self.distortion.distort(&xn);
        let uv = Vector2::new(self.fu * xd.x + self.cu, self.fv * xd.y + self.cv);
        let jf = Matrix2::new(self.fu, 0.0, 0.0, self.fv);
        Ok((uv, jf * jd * jn))
    }

    /// Ray `(x, y, 1)` through the pixel; undistortion by Gauss-Newton.
    pub fn backproject(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        let target = Vector2::new((uv.x - self.cu) / self.fu, (uv.y - self.cv) / self.fv);
        let mut x = target;
        if self.distortion != Distortion::None {
            for _ in 0..30 {
                let (xd, j) = self.distortion.distort(&x);
                let r = target - xd;
                if r.norm() < 1e-14 {
                    break;
                }
                match j.try_inverse() {
                    Some(ji) => x += ji * r,
                    None => break,
                }
            }
        }
        Vector3::new(x.x, x.y, 1.0)
    }

    pub fn contains(&self, uv: &Vector2<f64>, margin: f64) -> bool {
        uv.x >= margin
            && uv.y >= margin
            && uv.x < self.width as f64 - margin
            && uv.y < self.height as f64 - margin
    }
}

/// Cameras rigidly mounted on the IMU body, with constant extrinsics `T_SC`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
    pub extrinsics: Vec<Pose>,
}

impl Default for CameraRig {
    /// One forward-looking camera on a body with x forward, y left, z up.
    fn default() -> Self {
        Self {
            cameras: vec![CameraModel::default()],
            extrinsics: vec![forward_camera_extrinsics()],
        }
    }
}

/// `T_SC` for a camera whose optical axis is the body x axis.
pub fn forward_camera_extrinsics() -> Pose {
    let r_sc = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(r_sc);
    Pose::new(Vector3::zeros(), nalgebra::UnitQuaternion::from_rotation_matrix(&rot))
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("camera rig needs at least one camera".into()));
        }
        if self.cameras.len() != self.extrinsics.len() {
            return Err(Error::Config(format!(
                "{} cameras but {} extrinsics",
                self.cameras.len(),
                self.extrinsics.len()
            )));
        }
        for c in &self.cameras {
            if !(c.fu > 0.0 && c.fv > 0.0 && c.width > 0 && c.height > 0) {
                return Err(Error::Config("camera intrinsics must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Keypoint measurement of one landmark in one camera of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionFactor {
    pub cam: usize,
    pub landmark: LandmarkId,
    pub frame: FrameId,
    pub measurement: Vector2<f64>,
    /// 2×2 information matrix [px⁻²].
    pub weight: Matrix2<f64>,
}

/// Isotropic reprojection weight `I₂ / σ²`.
pub fn pixel_weight(sigma_px: f64) -> Matrix2<f64> {
    Matrix2::identity() / (sigma_px * sigma_px)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReprojectionEval {
    /// `z̃ − h(·)` [px].
    pub error: Vector2<f64>,
    /// With respect to `[δr, δα]` of `T_WS`.
    pub j_pose: Matrix2x6<f64>,
    /// With respect to the Euclidean landmark coordinates.
    pub j_landmark: Matrix2x3<f64>,
}

/// Reprojection error of Euclidean landmark `l_w` (homogeneous coordinate fixed at 1)
/// into camera `cam` at body pose `t_ws`. `None` when the point is behind the camera;
/// such observations drop out of the cost.
pub fn reprojection_error(
    rig: &CameraRig,
    cam: usize,
    t_ws: &Pose,
    l_w: &Vector3<f64>,
    measurement: &Vector2<f64>,
) -> Option<ReprojectionEval> {
    let t_sc = &rig.extrinsics[cam];
    let r_sw = t_ws.rotation().transpose();
    let r_cs = t_sc.rotation().transpose();
    let d = l_w - t_ws.r;
    let p_s = r_sw * d;
    let p_c = r_cs * (p_s - t_sc.r);
    let (uv, jh) = rig.cameras[cam].project(&p_c).ok()?;
    let r_cw = r_cs * r_sw;
    let jh_r = jh * r_cw;
    let mut j_pose = Matrix2x6::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&jh_r);
    j_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(-(jh_r * skew(&d))));
    Some(ReprojectionEval {
        error: measurement - uv,
        j_pose,
        j_landmark: -jh_r,
    })
}

/// Pixel location of a world point, if it projects in front of the camera.
pub fn project_world(rig: &CameraRig, cam: usize, t_ws: &Pose, l_w: &Vector3<f64>) -> Option<Vector2<f64>> {
    let t_wc = t_ws.compose(&rig.extrinsics[cam]);
    let p_c = t_wc.inverse().transform(l_w);
    rig.cameras[cam].project(&p_c).ok().map(|(uv, _)| uv)
}
