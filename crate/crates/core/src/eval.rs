//! Trajectory evaluation: yaw+translation alignment, ATE and distance-bucketed RPE.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{canonical, yaw_rotation, Pose};

pub type Trajectory = Vec<(f64, Pose)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Causal,
    #[serde(rename = "non_causal")]
    Final,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        Self {
            rmse: (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            mean: values.iter().sum::<f64>() / n,
            median,
            max: sorted[m - 1],
            count: m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub mode: EvalMode,
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
    pub yaw: f64,
    pub translation: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpeBucket {
    pub distance: f64,
    /// Relative position error [m].
    pub translation: Stats,
    /// Relative orientation error [deg].
    pub rotation_deg: Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpeReport {
    pub buckets: Vec<RpeBucket>,
}

impl RpeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("distance,count,trans_rmse,trans_mean,trans_median,trans_max,rot_rmse_deg,rot_mean_deg,rot_median_deg,rot_max_deg\n");
        for b in &self.buckets {
            let (t, r) = (&b.translation, &b.rotation_deg);
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                b.distance, t.count, t.rmse, t.mean, t.median, t.max, r.rmse, r.mean, r.median, r.max
            );
        }
        s
    }
}

/// Nearest-neighbour association within `tol` seconds. Returns (estimate, gt) pairs.
pub fn associate(est: &[(f64, Pose)], gt: &[(f64, Pose)], tol: f64) -> Vec<(Pose, Pose)> {
    let mut out = Vec::new();
    for (t, p) in est {
        let i = gt.partition_point(|(tg, _)| tg < t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|j| *j < gt.len())
            .min_by(|a, b| (gt[*a].0 - t).abs().total_cmp(&(gt[*b].0 - t).abs()));
        if let Some(j) = best {
            if (gt[j].0 - t).abs() <= tol {
                out.push((*p, gt[j].1));
            }
        }
    }
    out
}

/// Yaw and translation minimizing `Σ |R_z(ψ) p_e + t − p_g|²`.
pub fn align_yaw_position(pairs: &[(Pose, Pose)]) -> Result<(f64, Vector3<f64>)> {
    if pairs.len() < 2 {
        return Err(Error::InvalidInput("alignment needs at least two associated poses".into()));
    }
    let n = pairs.len() as f64;
    let ce = pairs.iter().map(|(e, _)| e.r).sum::<Vector3<f64>>() / n;
    let cg = pairs.iter().map(|(_, g)| g.r).sum::<Vector3<f64>>() / n;
    let (mut s, mut c) = (0.0, 0.0);
    for (e, g) in pairs {
        let a = e.r - ce;
        let b = g.r - cg;
        s += a.x * b.y - a.y * b.x;
        c += a.x * b.x + a.y * b.y;
    }
    let yaw = s.atan2(c);
    let t = cg - yaw_rotation(yaw) * ce;
    Ok((yaw, t))
}

pub fn apply_alignment(traj: &[(f64, Pose)], yaw: f64, t: &Vector3<f64>) -> Trajectory {
    let q = yaw_rotation(yaw);
    let tf = Pose::new(*t, q);
    traj.iter().map(|(ts, p)| (*ts, tf.compose(p))).collect()
}

pub fn compute_ate(est: &[(f64, Pose)], gt: &[(f64, Pose)], mode: EvalMode, tol: f64) -> Result<AteReport> {
    let pairs = associate(est, gt, tol);
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no associated poses".into()));
    }
    let (yaw, t) = align_yaw_position(&pairs)?;
    let q = yaw_rotation(yaw);
    let errors: Vec<f64> = pairs.iter().map(|(e, g)| (q * e.r + t - g.r).norm()).collect();
    let s = Stats::of(&errors);
    Ok(AteReport {
        mode,
        rmse: s.rmse,
        mean: s.mean,
        median: s.median,
        max: s.max,
        count: s.count,
        yaw,
        translation: t,
    })
}

/// Relative errors of pose pairs that are `d` apart in ground-truth path length.
pub fn compute_rpe(est: &[(f64, Pose)], gt: &[(f64, Pose)], buckets: &[f64], tol: f64) -> Result<RpeReport> {
    let pairs = associate(est, gt, tol);
    if pairs.len() < 2 {
        return Err(Error::InvalidInput("too few associated poses for relative errors".into()));
    }
    let mut s = vec![0.0];
    for w in pairs.windows(2) {
        let last = s[s.len() - 1];
        s.push(last + (w[1].1.r - w[0].1.r).norm());
    }
    let total = s[s.len() - 1];
    let smallest = buckets.iter().copied().fold(f64::INFINITY, f64::min);
    if !(total >= smallest) {
        return Err(Error::InvalidInput(format!("trajectory length {total:.3} m is shorter than the smallest bucket {smallest} m")));
    }
    let mut out = Vec::with_capacity(buckets.len());
    for &d in buckets {
        let mut trans = Vec::new();
        let mut rot = Vec::new();
        for i in 0..pairs.len() {
            let j = s.partition_point(|v| *v < s[i] + d - 1e-9);
            if j >= pairs.len() {
                break;
            }
            let (ei, gi) = pairs[i];
            let (ej, gj) = pairs[j];
            let rel_g = gi.inverse().compose(&gj);
            let rel_e = ei.inverse().compose(&ej);
            let err = rel_g.inverse().compose(&rel_e);
            trans.push(err.r.norm());
            rot.push(err.rotation_angle().to_degrees());
        }
        out.push(RpeBucket {
            distance: d,
            translation: Stats::of(&trans),
            rotation_deg: Stats::of(&rot),
        });
    }
    Ok(RpeReport { buckets: out })
}

pub fn format_tum(traj: &[(f64, Pose)]) -> String {
    let mut s = String::with_capacity(traj.len() * 120);
    for (t, p) in traj {
        let q = p.q.as_ref();
        let _ = writeln!(
            s,
            "{:.9} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
            t, p.r.x, p.r.y, p.r.z, q.i, q.j, q.k, q.w
        );
    }
    s
}

pub fn write_tum(path: &Path, traj: &[(f64, Pose)]) -> Result<()> {
    std::fs::write(path, format_tum(traj))?;
    Ok(())
}

pub fn parse_tum(text: &str) -> Result<Trajectory> {
    let mut out: Trajectory = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Dataset(format!("line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::Dataset(format!("line {}: expected 8 values, got {}", n + 1, v.len())));
        }
        if out.last().is_some_and(|(t, _)| v[0] <= *t) {
            return Err(Error::Dataset(format!("line {}: timestamps must increase", n + 1)));
        }
        let q = nalgebra::Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Dataset(format!("line {}: quaternion is not unit length", n + 1)));
        }
        out.push((v[0], Pose::new(Vector3::new(v[1], v[2], v[3]), canonical(UnitQuaternion::from_quaternion(q)))));
    }
    Ok(out)
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    parse_tum(&text)
}
