//! Synthetic visual-inertial datasets with exact ground truth.
//!
//! A trajectory is a smooth path `P(s)` traversed with a time warp `s(t)`: the
//! body rests for a while, then accelerates with a quintic smootherstep speed
//! profile to a constant path rate. The body x axis follows the path tangent,
//! with a small sinusoidal attitude dither that fades in with the speed ramp.
//! Everything the IMU sees is evaluated analytically.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{project_world, CameraRig};
use crate::error::{Error, Result};
use crate::geometry::{canonical, Pose, Quat};
use crate::imu::{predict, preintegrate, ImuParams, ImuSample, NavState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PathKind {
    Circle { radius: f64, height: f64 },
    /// `(a_x sin s, a_y sin 2s, h + a_z sin 3s)`.
    Lissajous { ax: f64, ay: f64, az: f64, height: f64 },
    /// Periodic uniform cubic B-spline through (near) the control points; one unit of `s` per segment.
    Waypoints { points: Vec<Vector3<f64>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dither {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub yaw_hz: f64,
    pub pitch_hz: f64,
    pub roll_hz: f64,
}

impl Default for Dither {
    fn default() -> Self {
        Self {
            yaw: 0.15,
            pitch: 0.08,
            roll: 0.08,
            yaw_hz: 0.23,
            pitch_hz: 0.31,
            roll_hz: 0.37,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub path: PathKind,
    pub duration: f64,
    pub frame_rate: f64,
    pub imu_rate: f64,
    /// `ds/dt` once the ramp is complete.
    pub path_rate: f64,
    /// Initial time at rest [s].
    pub rest: f64,
    /// Duration of the speed ramp [s].
    pub ramp: f64,
    pub dither: Dither,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            path: PathKind::Circle {
                radius: 3.0,
                height: 0.0,
            },
            duration: 20.0,
            frame_rate: 10.0,
            imu_rate: 200.0,
            path_rate: 0.5,
            rest: 1.0,
            ramp: 2.0,
            dither: Dither::default(),
        }
    }
}

/// Kinematics at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub q: Quat,
    /// Body-frame angular rate.
    pub omega: Vector3<f64>,
}

fn smootherstep(x: f64) -> (f64, f64, f64) {
    // integral, value, derivative
    let x = x.clamp(0.0, 1.0);
    let x2 = x * x;
    let x3 = x2 * x;
    (
        x3 * x3 - 3.0 * x3 * x2 + 2.5 * x2 * x2,
        6.0 * x3 * x2 - 15.0 * x2 * x2 + 10.0 * x3,
        30.0 * x2 * x2 - 60.0 * x3 + 30.0 * x2,
    )
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.duration, self.frame_rate, self.imu_rate, self.path_rate, self.ramp];
        if !pos.iter().all(|v| v.is_finite() && *v > 0.0) || !(self.rest >= 0.0) {
            return Err(Error::Config("trajectory durations and rates must be positive".into()));
        }
        let ratio = self.imu_rate / self.frame_rate;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config("IMU rate must be an integer multiple of the frame rate".into()));
        }
        match &self.path {
            PathKind::Circle { radius, .. } if !(*radius > 0.0) => {
                Err(Error::Config("circle radius must be positive".into()))
            }
            PathKind::Waypoints { points } if points.len() < 4 => {
                Err(Error::Config("waypoint spline needs at least 4 points".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn imu_per_frame(&self) -> usize {
        (self.imu_rate / self.frame_rate).round() as usize
    }

    /// Path position and its first two derivatives with respect to `s`.
    pub fn path_point(&self, s: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        match &self.path {
            PathKind::Circle { radius: r, height: h } => {
                let (sn, cs) = s.sin_cos();
                (
                    Vector3::new(r * cs, r * sn, *h),
                    Vector3::new(-r * sn, r * cs, 0.0),
                    Vector3::new(-r * cs, -r * sn, 0.0),
                )
            }
            PathKind::Lissajous { ax, ay, az, height } => {
                let (s1, c1) = s.sin_cos();
                let (s2, c2) = (2.0 * s).sin_cos();
                let (s3, c3) = (3.0 * s).sin_cos();
                (
                    Vector3::new(ax * s1, ay * s2, height + az * s3),
                    Vector3::new(ax * c1, 2.0 * ay * c2, 3.0 * az * c3),
                    Vector3::new(-ax * s1, -4.0 * ay * s2, -9.0 * az * s3),
                )
            }
            PathKind::Waypoints { points } => {
                let n = points.len() as i64;
                let i = s.floor();
                let u = s - i;
                let i = i as i64;
                let cp = |k: i64| points[(i + k).rem_euclid(n) as usize];
                let um = 1.0 - u;
                let b = [
                    um * um * um / 6.0,
                    (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0,
                    (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
                    u * u * u / 6.0,
                ];
                let d = [-0.5 * um * um, 1.5 * u * u - 2.0 * u, -1.5 * u * u + u + 0.5, 0.5 * u * u];
                let dd = [um, 3.0 * u - 2.0, 1.0 - 3.0 * u, u];
                let mut out = (Vector3::zeros(), Vector3::zeros(), Vector3::zeros());
                for k in 0..4 {
                    let p = cp(k as i64);
                    out.0 += p * b[k];
                    out.1 += p * d[k];
                    out.2 += p * dd[k];
                }
                out
            }
        }
    }

    /// `(s, ṡ, s̈, ramp, ramp')`.
    fn warp(&self, t: f64) -> (f64, f64, f64, f64, f64) {
        let w = self.path_rate;
        let tau = (t - self.rest) / self.ramp;
        if tau <= 0.0 {
            (0.0, 0.0, 0.0, 0.0, 0.0)
        } else if tau < 1.0 {
            let (int, val, der) = smootherstep(tau);
            (w * self.ramp * int, w * val, w * der / self.ramp, val, der / self.ramp)
        } else {
            (w * (0.5 * self.ramp + (t - self.rest - self.ramp)), w, 0.0, 1.0, 0.0)
        }
    }

    pub fn kinematics(&self, t: f64) -> Kinematics {
        let (s, sd, sdd, ramp, ramp_d) = self.warp(t);
        let (p, d1, d2) = self.path_point(s);
        let v = d1 * sd;
        let a = d2 * sd * sd + d1 * sdd;

        let hxy2 = d1.x * d1.x + d1.y * d1.y;
        let hxy = hxy2.sqrt();
        let yaw0 = d1.y.atan2(d1.x);
        let yaw0_d = sd * (d1.x * d2.y - d1.y * d2.x) / hxy2;
        let (y, yd) = (-d1.z, -d2.z);
        let x_d = (d1.x * d2.x + d1.y * d2.y) / hxy;
        let pitch0 = y.atan2(hxy);
        let pitch0_d = sd * (hxy * yd - y * x_d) / (hxy2 + y * y);

        let dz = &self.dither;
        let osc = |amp: f64, hz: f64| -> (f64, f64) {
            let w = 2.0 * PI * hz;
            let (sn, cs) = (w * t).sin_cos();
            (amp * sn * ramp, amp * (w * cs * ramp + sn * ramp_d))
        };
        let (dy, dyd) = osc(dz.yaw, dz.yaw_hz);
        let (dp, dpd) = osc(dz.pitch, dz.pitch_hz);
        let (dr, drd) = osc(dz.roll, dz.roll_hz);
        let (yaw, yaw_d) = (yaw0 + dy, yaw0_d + dyd);
        let (pitch, pitch_d) = (pitch0 + dp, pitch0_d + dpd);
        let (roll, roll_d) = (dr, drd);

        let q = canonical(UnitQuaternion::from_euler_angles(roll, pitch, yaw));
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let omega = Vector3::new(
            roll_d - yaw_d * sp,
            pitch_d * cr + yaw_d * sr * cp,
            -pitch_d * sr + yaw_d * cr * cp,
        );
        Kinematics { p, v, a, q, omega }
    }

    /// Centroid of the path over one period (or the control points).
    fn centroid(&self) -> Vector3<f64> {
        match &self.path {
            PathKind::Circle { height, .. } => Vector3::new(0.0, 0.0, *height),
            PathKind::Lissajous { height, .. } => Vector3::new(0.0, 0.0, *height),
            PathKind::Waypoints { points } => points.iter().sum::<Vector3<f64>>() / points.len() as f64,
        }
    }
}

/// Landmarks uniform in a cylindrical shell around the path centroid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkField {
    pub count: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Vertical extent around the centroid.
    pub half_height: f64,
}

impl Default for LandmarkField {
    fn default() -> Self {
        Self {
            count: 300,
            inner_radius: 6.0,
            outer_radius: 10.0,
            half_height: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub pixel_sigma: f64,
    pub outlier_fraction: f64,
    /// Adds IMU white noise and bias random walk from the IMU parameters.
    pub imu_noise: bool,
    pub initial_gyro_bias: Vector3<f64>,
    pub initial_accel_bias: Vector3<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            outlier_fraction: 0.02,
            imu_noise: true,
            initial_gyro_bias: Vector3::zeros(),
            initial_accel_bias: Vector3::zeros(),
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        Self {
            pixel_sigma: 0.0,
            outlier_fraction: 0.0,
            imu_noise: false,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub trajectory: TrajectorySpec,
    pub landmarks: LandmarkField,
    pub rig: CameraRig,
    pub imu: ImuParams,
    pub noise: NoiseConfig,
    pub min_observations: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    /// Border (px) inside which projections count as visible.
    pub image_margin: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            trajectory: TrajectorySpec::default(),
            landmarks: LandmarkField::default(),
            rig: CameraRig::default(),
            imu: ImuParams::default(),
            noise: NoiseConfig::default(),
            min_observations: 30,
            min_depth: 0.5,
            max_depth: 30.0,
            image_margin: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimObservation {
    pub landmark: u64,
    pub uv: Vector2<f64>,
    /// Ground-truth bookkeeping only; estimators must not read it.
    pub outlier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimFrame {
    pub frame_id: u64,
    pub t: f64,
    /// One observation list per camera.
    pub cameras: Vec<Vec<SimObservation>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSample {
    pub t: f64,
    pub state: NavState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    pub config: SimConfig,
    pub seed: u64,
    /// Ground truth at every IMU sample.
    pub gt: Vec<GtSample>,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<SimFrame>,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

pub fn generate(cfg: &SimConfig, seed: u64) -> Result<SimDataset> {
    cfg.trajectory.validate()?;
    cfg.rig.validate()?;
    cfg.imu.validate()?;
    let tr = &cfg.trajectory;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outlier_rng = ChaCha8Rng::seed_from_u64(seed);
    outlier_rng.set_stream(1);

    let c = tr.centroid();
    let lf = &cfg.landmarks;
    let mut landmarks = BTreeMap::new();
    for id in 0..lf.count as u64 {
        let r2 = rng.random_range(lf.inner_radius.powi(2)..=lf.outer_radius.powi(2));
        let phi = rng.random_range(0.0..2.0 * PI);
        let z = rng.random_range(-lf.half_height..=lf.half_height);
        let r = r2.sqrt();
        landmarks.insert(id, c + Vector3::new(r * phi.cos(), r * phi.sin(), z));
    }

    let n = (tr.duration * tr.imu_rate).round() as usize + 1;
    let dt = 1.0 / tr.imu_rate;
    let g_w = cfg.imu.gravity();
    let mut bg = cfg.noise.initial_gyro_bias;
    let mut ba = cfg.noise.initial_accel_bias;
    let sd_g = cfg.imu.sigma_g * tr.imu_rate.sqrt();
    let sd_a = cfg.imu.sigma_a * tr.imu_rate.sqrt();
    let sd_bg = cfg.imu.sigma_bg * dt.sqrt();
    let sd_ba = cfg.imu.sigma_ba * dt.sqrt();
    let mut gt = Vec::with_capacity(n);
    let mut imu = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let k = tr.kinematics(t);
        let mut gyro = k.omega + bg;
        let mut accel = k.q.inverse() * (k.a - g_w) + ba;
        if cfg.noise.imu_noise {
            gyro += gaussian3(&mut rng) * sd_g;
            accel += gaussian3(&mut rng) * sd_a;
        }
        gt.push(GtSample {
            t,
            state: NavState {
                r: k.p,
                q: k.q,
                v: k.v,
                bg,
                ba,
            },
        });
        imu.push(ImuSample { t, gyro, accel });
        if cfg.noise.imu_noise {
            bg += gaussian3(&mut rng) * sd_bg;
            ba += gaussian3(&mut rng) * sd_ba;
        }
    }

    let step = tr.imu_per_frame();
    let mut frames = Vec::new();
    for (fid, gi) in (0..n).step_by(step).enumerate() {
        let s = &gt[gi];
        let pose = s.state.pose();
        let mut cameras = Vec::with_capacity(cfg.rig.len());
        let mut count = 0;
        for cam in 0..cfg.rig.len() {
            let model = &cfg.rig.cameras[cam];
            let t_wc = pose.compose(&cfg.rig.extrinsics[cam]);
            let t_cw = t_wc.inverse();
            let mut list = Vec::new();
            for (id, l) in &landmarks {
                let depth = t_cw.transform(l).z;
                if depth < cfg.min_depth || depth > cfg.max_depth {
                    continue;
                }
                let Some(uv) = project_world(&cfg.rig, cam, &pose, l) else {
                    continue;
                };
                if !model.contains(&uv, cfg.image_margin) {
                    continue;
                }
                let noise = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * cfg.noise.pixel_sigma;
                let flip: f64 = outlier_rng.random();
                let (u_rand, v_rand): (f64, f64) = (outlier_rng.random(), outlier_rng.random());
                let outlier = flip < cfg.noise.outlier_fraction;
                let measured = if outlier {
                    Vector2::new(u_rand * model.width as f64, v_rand * model.height as f64)
                } else {
                    uv + noise
                };
                list.push(SimObservation {
                    landmark: *id,
                    uv: measured,
                    outlier,
                });
            }
            count += list.len();
            cameras.push(list);
        }
        if count < cfg.min_observations {
            return Err(Error::InvalidInput(format!(
                "infeasible scenario: frame {fid} at t = {:.3} sees {count} landmarks (< {})",
                s.t, cfg.min_observations
            )));
        }
        frames.push(SimFrame {
            frame_id: fid as u64,
            t: s.t,
            cameras,
        });
    }

    Ok(SimDataset {
        config: cfg.clone(),
        seed,
        gt,
        imu,
        frames,
        landmarks,
    })
}

impl SimDataset {
    /// Ground truth at frame index `k`.
    pub fn gt_at_frame(&self, k: usize) -> &GtSample {
        &self.gt[k * self.config.trajectory.imu_per_frame()]
    }

    pub fn gt_poses_at_frames(&self) -> Vec<(f64, Pose)> {
        (0..self.frames.len())
            .map(|k| {
                let g = self.gt_at_frame(k);
                (g.t, g.state.pose())
            })
            .collect()
    }

    /// IMU samples with `t0 <= t <= t1`.
    pub fn imu_between(&self, t0: f64, t1: f64) -> &[ImuSample] {
        let a = self.imu.partition_point(|s| s.t < t0 - 1e-9);
        let b = self.imu.partition_point(|s| s.t <= t1 + 1e-9);
        &self.imu[a..b]
    }
}

/// Dead-reckons the IMU stream frame to frame from the first ground-truth
/// state and returns the largest position deviation from ground truth.
pub fn integrate_check(ds: &SimDataset) -> Result<f64> {
    let mut x = ds.gt[0].state;
    let mut worst: f64 = 0.0;
    for w in ds.frames.windows(2) {
        let samples = ds.imu_between(w[0].t, w[1].t);
        let pre = preintegrate(samples, &ds.config.imu, &x.bg, &x.ba)?;
        x = predict(&x, &pre, &ds.config.imu);
        let k = w[1].frame_id as usize;
        worst = worst.max((x.r - ds.gt_at_frame(k).state.r).norm());
    }
    Ok(worst)
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Dataset(e.to_string())
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    seed: u64,
    config: SimConfig,
}

const GT_HEADER: [&str; 17] = [
    "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "bgx", "bgy", "bgz", "bax", "bay", "baz",
];
const IMU_HEADER: [&str; 7] = ["t", "gx", "gy", "gz", "ax", "ay", "az"];
const LANDMARK_HEADER: [&str; 4] = ["id", "x", "y", "z"];

/// Writes `gt.csv`, `imu.csv`, `frames.jsonl`, `landmarks.csv` and `config.json`.
pub fn write_dataset(ds: &SimDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("gt.csv")).map_err(io_err)?;
    w.write_record(GT_HEADER).map_err(io_err)?;
    for g in &ds.gt {
        let s = &g.state;
        let q = s.q.as_ref();
        let vals = [
            g.t, s.r.x, s.r.y, s.r.z, q.w, q.i, q.j, q.k, s.v.x, s.v.y, s.v.z, s.bg.x, s.bg.y, s.bg.z, s.ba.x, s.ba.y, s.ba.z,
        ];
        w.write_record(vals.iter().map(|v| f(*v))).map_err(io_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("imu.csv")).map_err(io_err)?;
    w.write_record(IMU_HEADER).map_err(io_err)?;
    for s in &ds.imu {
        let vals = [s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z];
        w.write_record(vals.iter().map(|v| f(*v))).map_err(io_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("landmarks.csv")).map_err(io_err)?;
    w.write_record(LANDMARK_HEADER).map_err(io_err)?;
    for (id, l) in &ds.landmarks {
        w.write_record([id.to_string(), f(l.x), f(l.y), f(l.z)]).map_err(io_err)?;
    }
    w.flush()?;

    let mut out = BufWriter::new(fs::File::create(dir.join("frames.jsonl"))?);
    for fr in &ds.frames {
        serde_json::to_writer(&mut out, fr)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let cfg = ConfigFile {
        seed: ds.seed,
        config: ds.config.clone(),
    };
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    Ok(())
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let h = r.headers().map_err(io_err)?;
    if h.iter().ne(header.iter().copied()) {
        return Err(Error::Dataset(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io_err)?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        if row.len() != header.len() {
            return Err(Error::Dataset(format!("{}: short row", path.display())));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    Ok(read_rows(path, &IMU_HEADER)?
        .into_iter()
        .map(|r| ImuSample {
            t: r[0],
            gyro: Vector3::new(r[1], r[2], r[3]),
            accel: Vector3::new(r[4], r[5], r[6]),
        })
        .collect())
}

pub fn read_gt_csv(path: &Path) -> Result<Vec<GtSample>> {
    Ok(read_rows(path, &GT_HEADER)?
        .into_iter()
        .map(|r| GtSample {
            t: r[0],
            state: NavState {
                r: Vector3::new(r[1], r[2], r[3]),
                q: canonical(UnitQuaternion::new_normalize(nalgebra::Quaternion::new(r[4], r[5], r[6], r[7]))),
                v: Vector3::new(r[8], r[9], r[10]),
                bg: Vector3::new(r[11], r[12], r[13]),
                ba: Vector3::new(r[14], r[15], r[16]),
            },
        })
        .collect())
}

pub fn read_frames(path: &Path) -> Result<Vec<SimFrame>> {
    let file = fs::File::open(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fr: SimFrame = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        frames.push(fr);
    }
    Ok(frames)
}

pub fn read_dataset(dir: &Path) -> Result<SimDataset> {
    let cfg_text = fs::read_to_string(dir.join("config.json"))
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join("config.json").display())))?;
    let cfg: ConfigFile = serde_json::from_str(&cfg_text).map_err(|e| Error::Dataset(format!("config.json: {e}")))?;
    let landmarks = read_rows(&dir.join("landmarks.csv"), &LANDMARK_HEADER)?
        .into_iter()
        .map(|r| (r[0] as u64, Vector3::new(r[1], r[2], r[3])))
        .collect();
    let ds = SimDataset {
        config: cfg.config,
        seed: cfg.seed,
        gt: read_gt_csv(&dir.join("gt.csv"))?,
        imu: read_imu_csv(&dir.join("imu.csv"))?,
        frames: read_frames(&dir.join("frames.jsonl"))?,
        landmarks,
    };
    if ds.imu.is_empty() || ds.frames.is_empty() {
        return Err(Error::Dataset(format!("{}: empty dataset", dir.display())));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_minus;

    fn quiet(spec: TrajectorySpec) -> SimConfig {
        SimConfig {
            trajectory: spec,
            noise: NoiseConfig::noiseless(),
            ..Default::default()
        }
    }

    #[test]
    fn rest_gives_gravity_only() {
        let cfg = quiet(TrajectorySpec {
            duration: 0.9,
            ..Default::default()
        });
        let ds = generate(&cfg, 1).unwrap();
        for s in &ds.imu {
            assert_eq!(s.gyro, Vector3::zeros());
            assert!((s.accel - Vector3::new(0.0, 0.0, 9.81)).norm() < 1e-15);
        }
    }

    #[test]
    fn circle_centripetal_acceleration() {
        let (r, w) = (3.0, 0.5);
        let mut spec = TrajectorySpec {
            duration: 8.0,
            path_rate: w,
            ..Default::default()
        };
        spec.dither = Dither {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            ..Default::default()
        };
        let ds = generate(&quiet(spec), 1).unwrap();
        for s in ds.imu.iter().filter(|s| s.t > 3.5) {
            let horiz = (s.accel.norm_squared() - 9.81 * 9.81).sqrt();
            assert!((horiz - r * w * w).abs() < 1e-9);
            assert!((s.gyro.z - w).abs() < 1e-12);
        }
    }

    fn finite_difference_kinematics(spec: &TrajectorySpec) {
        let h = 1e-5;
        for i in 0..60 {
            let t = 0.5 + 0.2 * i as f64;
            let k = spec.kinematics(t);
            let (kp, km) = (spec.kinematics(t + h), spec.kinematics(t - h));
            assert!(((kp.p - km.p) / (2.0 * h) - k.v).norm() < 1e-6);
            assert!(((kp.v - km.v) / (2.0 * h) - k.a).norm() < 1e-6);
            // body rate: q(t+h) = q(t) Exp(ω h)
            let w_num = box_minus(&(k.q.inverse() * kp.q), &(k.q.inverse() * km.q)) / (2.0 * h);
            assert!((w_num - k.omega).norm() < 1e-5, "{t}: {w_num} vs {}", k.omega);
        }
    }

    #[test]
    fn kinematics_match_finite_differences() {
        finite_difference_kinematics(&TrajectorySpec::default());
        finite_difference_kinematics(&TrajectorySpec {
            path: PathKind::Lissajous {
                ax: 4.0,
                ay: 2.0,
                az: 0.5,
                height: 0.0,
            },
            path_rate: 0.2,
            ..Default::default()
        });
        finite_difference_kinematics(&TrajectorySpec {
            path: PathKind::Waypoints {
                points: vec![
                    Vector3::new(3.0, 0.0, 0.0),
                    Vector3::new(0.0, 3.0, 0.5),
                    Vector3::new(-3.0, 0.0, 0.0),
                    Vector3::new(0.0, -3.0, -0.5),
                ],
            },
            path_rate: 0.3,
            ..Default::default()
        });
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec {
                duration: 4.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&generate(&cfg, 9).unwrap(), a.path()).unwrap();
        write_dataset(&generate(&cfg, 9).unwrap(), b.path()).unwrap();
        for f in ["gt.csv", "imu.csv", "frames.jsonl", "landmarks.csv", "config.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let other = generate(&cfg, 10).unwrap();
        assert_ne!(other.imu, generate(&cfg, 9).unwrap().imu);
    }

    #[test]
    fn dataset_roundtrip() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec {
                duration: 3.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = generate(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.imu, ds.imu);
        assert_eq!(back.frames, ds.frames);
        assert_eq!(back.landmarks, ds.landmarks);
        assert_eq!(back.config, ds.config);
        for (a, b) in back.gt.iter().zip(&ds.gt) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.state.r, b.state.r);
            assert!(box_minus(&a.state.q, &b.state.q).norm() < 1e-15);
        }
    }

    #[test]
    fn dead_reckoning_matches_ground_truth() {
        let circle = generate(
            &quiet(TrajectorySpec {
                duration: 10.0,
                ..Default::default()
            }),
            1,
        )
        .unwrap();
        assert!(integrate_check(&circle).unwrap() < 1e-4);
        let rest = generate(
            &quiet(TrajectorySpec {
                duration: 0.9,
                ..Default::default()
            }),
            1,
        )
        .unwrap();
        assert!(integrate_check(&rest).unwrap() < 1e-12);
        let liss = SimConfig {
            landmarks: LandmarkField {
                count: 600,
                inner_radius: 7.0,
                outer_radius: 12.0,
                half_height: 3.0,
            },
            ..quiet(TrajectorySpec {
                path: PathKind::Lissajous {
                    ax: 4.0,
                    ay: 2.0,
                    az: 0.3,
                    height: 0.0,
                },
                path_rate: 0.3,
                duration: 20.0,
                ..Default::default()
            })
        };
        assert!(integrate_check(&generate(&liss, 1).unwrap()).unwrap() < 1e-3);
    }

    #[test]
    fn every_frame_sees_enough_visible_landmarks() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec {
                duration: 15.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = generate(&cfg, 4).unwrap();
        for (k, fr) in ds.frames.iter().enumerate() {
            let pose = ds.gt_at_frame(k).state.pose();
            let n: usize = fr.cameras.iter().map(|c| c.len()).sum();
            assert!(n >= 30);
            for o in &fr.cameras[0] {
                let uv = project_world(&ds.config.rig, 0, &pose, &ds.landmarks[&o.landmark]).unwrap();
                assert!(ds.config.rig.cameras[0].contains(&uv, 0.0));
            }
        }
    }

    #[test]
    fn infeasible_scenario_is_rejected() {
        let cfg = SimConfig {
            landmarks: LandmarkField {
                count: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pixel_noise_statistics() {
        let cfg = SimConfig {
            trajectory: TrajectorySpec {
                duration: 12.0,
                ..Default::default()
            },
            noise: NoiseConfig {
                pixel_sigma: 0.8,
                outlier_fraction: 0.02,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = generate(&cfg, 5).unwrap();
        let mut sum2 = 0.0;
        let mut n = 0usize;
        let (mut outliers, mut total) = (0usize, 0usize);
        for (k, fr) in ds.frames.iter().enumerate() {
            let pose = ds.gt_at_frame(k).state.pose();
            for o in &fr.cameras[0] {
                total += 1;
                if o.outlier {
                    outliers += 1;
                    continue;
                }
                let uv = project_world(&ds.config.rig, 0, &pose, &ds.landmarks[&o.landmark]).unwrap();
                let e = o.uv - uv;
                sum2 += e.norm_squared();
                n += 2;
            }
        }
        assert!(n >= 10_000);
        let sd = (sum2 / n as f64).sqrt();
        assert!((sd - 0.8).abs() < 0.05 * 0.8, "{sd}");
        let frac = outliers as f64 / total as f64;
        assert!((frac - 0.02).abs() < 0.01, "{frac}");
    }

    #[test]
    fn outliers_do_not_change_inlier_noise() {
        let mut cfg = SimConfig {
            trajectory: TrajectorySpec {
                duration: 3.0,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.noise.outlier_fraction = 0.0;
        let clean = generate(&cfg, 6).unwrap();
        cfg.noise.outlier_fraction = 0.05;
        let dirty = generate(&cfg, 6).unwrap();
        assert_eq!(clean.imu, dirty.imu);
        for (a, b) in clean.frames.iter().zip(&dirty.frames) {
            for (x, y) in a.cameras[0].iter().zip(&b.cameras[0]) {
                if !y.outlier {
                    assert_eq!(x.uv, y.uv);
                }
            }
        }
    }
}
