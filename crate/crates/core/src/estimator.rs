//! Realtime windowed estimator.
//!
//! Frames enter the `recent` set; once they fall out of it, keyframes move to
//! `K` and other frames are dropped (their IMU factors are merged). When `K`
//! overflows, the keyframe with the least co-visibility with the current frame
//! or current keyframe becomes a posegraph frame: its observations are
//! marginalized into two-pose factors chosen by a maximum spanning tree over
//! co-observation counts. Only the `A` most recent states stay variable.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use nalgebra::{Matrix3x4, SMatrix, UnitQuaternion, Vector2, Vector3};
use petgraph::algo::min_spanning_tree;
use petgraph::data::Element;
use petgraph::graph::UnGraph;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_weight, project_world, reprojection_error, CameraRig, ReprojectionFactor};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{canonical, Pose};
use crate::imu::{predict, samples_between, ImuFactor, ImuSample, NavState};
use crate::loopclosure::{Event, LoopState};
use crate::marginal::make_two_pose_factor;
use crate::solver::{optimize, FactorGraph, LandmarkVar, OptReport, StateVar};
use crate::{FrameId, LandmarkId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Number of most recent frames `T`.
    pub recent: usize,
    /// Keyframes outside the recent set, `K`.
    pub max_keyframes: usize,
    /// Loop-closure frames, `L`.
    pub max_loop_frames: usize,
    pub a_min: usize,
    /// States no older than this [s] are always variable.
    pub delta_t: f64,
    /// Keypoint circle radius [px].
    pub r_kpt: f64,
    /// Keyframe overlap threshold `t_o`.
    pub t_o: f64,
    /// Raster resolution of the overlap masks relative to the image.
    pub raster_scale: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            recent: 3,
            max_keyframes: 5,
            max_loop_frames: 5,
            a_min: 12,
            delta_t: 2.0,
            r_kpt: 15.0,
            t_o: 0.55,
            raster_scale: 0.25,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.recent < 2 || self.max_keyframes == 0 || self.max_loop_frames == 0 || self.a_min == 0 {
            return Err(Error::Config("window sizes must be positive and recent >= 2".into()));
        }
        let pos = [self.delta_t, self.r_kpt, self.raster_scale];
        if !pos.iter().all(|v| v.is_finite() && *v > 0.0) || !(0.0..=1.0).contains(&self.t_o) {
            return Err(Error::Config("invalid window thresholds".into()));
        }
        Ok(())
    }
}

/// Parameters of the data-association and landmark initialization stand-in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub pixel_sigma: f64,
    /// Known landmarks are matched only within this distance of their predicted projection [px].
    pub match_gate_px: f64,
    pub min_parallax_deg: f64,
    /// Triangulated points must reproject within this many σ in every view.
    pub triangulation_gate_sigma: f64,
    pub min_depth: f64,
    /// Largest tolerated gap between IMU samples [s].
    pub gap_max: f64,
    /// Accelerometer samples averaged for the initial roll and pitch.
    pub init_samples: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            match_gate_px: 40.0,
            min_parallax_deg: 1.0,
            triangulation_gate_sigma: 3.0,
            min_depth: 0.3,
            gap_max: 0.1,
            init_samples: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vio,
    Slam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSet {
    Recent,
    Keyframe,
    Posegraph,
    /// Non-keyframe removed from the graph; its pose follows an anchor state.
    Dropped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub cam: usize,
    pub uv: Vector2<f64>,
    /// Track identifier from the data-association front end.
    pub track: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameInput {
    pub id: FrameId,
    pub t: f64,
    pub keypoints: Vec<Keypoint>,
}

impl From<&crate::sim::SimFrame> for FrameInput {
    fn from(f: &crate::sim::SimFrame) -> Self {
        let keypoints = f
            .cameras
            .iter()
            .enumerate()
            .flat_map(|(cam, list)| {
                list.iter().map(move |o| Keypoint {
                    cam,
                    uv: o.uv,
                    track: o.landmark,
                })
            })
            .collect();
        Self {
            id: FrameId(f.frame_id),
            t: f.t,
            keypoints,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: FrameId,
    pub t: f64,
    pub is_keyframe: bool,
    pub set: FrameSet,
    /// Member of the loop-closure set `L` (overlays `P`).
    pub in_loop: bool,
    pub tracks: BTreeSet<u64>,
    /// For dropped frames: the state they were attached to and the relative pose.
    pub anchor: Option<(FrameId, Pose)>,
}

/// Per-stage wall-clock timings in milliseconds, one entry per frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<String, Vec<f64>>,
}

impl Timings {
    pub fn record(&mut self, stage: &str, since: Instant) {
        let ms = since.elapsed().as_secs_f64() * 1e3;
        self.stages.entry(stage.to_string()).or_default().push(ms);
    }
}

/// Snapshot of the window sets after a frame, for invariant checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub frame: FrameId,
    pub recent: usize,
    pub keyframes: usize,
    pub loop_frames: usize,
    pub posegraph: usize,
    pub states: usize,
    /// `A = max(A_min, A_ΔT)`.
    pub a: usize,
    pub variable_states: Vec<FrameId>,
    pub expected_variable: Vec<FrameId>,
    pub is_keyframe: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub frame: FrameId,
    pub pose: Pose,
    pub is_keyframe: bool,
    pub optimization: OptReport,
}

pub struct Estimator {
    pub(crate) cfg: Config,
    pub(crate) mode: Mode,
    pub(crate) graph: FactorGraph,
    pub(crate) frames: BTreeMap<FrameId, FrameEntry>,
    pub(crate) recent: VecDeque<FrameId>,
    pub(crate) keyframes: BTreeSet<FrameId>,
    pub(crate) loop_frames: BTreeSet<FrameId>,
    pub(crate) track_to_lm: BTreeMap<u64, LandmarkId>,
    pub(crate) lm_to_track: BTreeMap<LandmarkId, u64>,
    pending: BTreeMap<u64, Vec<(FrameId, usize, Vector2<f64>)>>,
    next_landmark: u64,
    imu_buffer: Vec<ImuSample>,
    init_accel: Vec<Vector3<f64>>,
    leveled: bool,
    pub(crate) current_keyframe: Option<FrameId>,
    pub(crate) causal: Vec<(FrameId, f64, Pose)>,
    pub(crate) events: Vec<Event>,
    pub(crate) timings: Timings,
    pub(crate) loop_state: LoopState,
    pub(crate) frame_count: u64,
}

fn roll_pitch_from_accel(a: &Vector3<f64>) -> UnitQuaternion<f64> {
    let roll = a.y.atan2(a.z);
    let pitch = (-a.x).atan2((a.y * a.y + a.z * a.z).sqrt());
    canonical(UnitQuaternion::from_euler_angles(roll, pitch, 0.0))
}

/// Fraction of the keypoint area (union of circles) covered by matched keypoints.
pub fn overlap_fraction(rig: &CameraRig, keypoints: &[Keypoint], matched: &[bool], r_kpt: f64, scale: f64) -> f64 {
    let mut all = 0usize;
    let mut hit = 0usize;
    for (cam, model) in rig.cameras.iter().enumerate() {
        let w = ((model.width as f64) * scale).ceil() as usize;
        let h = ((model.height as f64) * scale).ceil() as usize;
        let mut mask_all = vec![false; w * h];
        let mut mask_hit = vec![false; w * h];
        let r = r_kpt * scale;
        for (kp, m) in keypoints.iter().zip(matched) {
            if kp.cam != cam {
                continue;
            }
            let (cu, cv) = (kp.uv.x * scale, kp.uv.y * scale);
            let x0 = (cu - r).floor().max(0.0) as usize;
            let x1 = ((cu + r).ceil().max(0.0) as usize).min(w);
            let y0 = (cv - r).floor().max(0.0) as usize;
            let y1 = ((cv + r).ceil().max(0.0) as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let dx = x as f64 + 0.5 - cu;
                    let dy = y as f64 + 0.5 - cv;
                    if dx * dx + dy * dy <= r * r {
                        mask_all[y * w + x] = true;
                        if *m {
                            mask_hit[y * w + x] = true;
                        }
                    }
                }
            }
        }
        all += mask_all.iter().filter(|v| **v).count();
        hit += mask_hit.iter().filter(|v| **v).count();
    }
    if all == 0 {
        0.0
    } else {
        hit as f64 / all as f64
    }
}

/// Maximum spanning tree over co-observation counts; ties are broken by the
/// lexicographically smaller `(min id, max id)` pair.
pub fn maximum_spanning_tree(nodes: &[FrameId], weights: &BTreeMap<(FrameId, FrameId), usize>) -> Vec<(FrameId, FrameId)> {
    let mut g = UnGraph::<FrameId, (Reverse<usize>, FrameId, FrameId)>::new_undirected();
    let idx: BTreeMap<FrameId, _> = nodes.iter().map(|n| (*n, g.add_node(*n))).collect();
    for (&(a, b), &w) in weights {
        if w == 0 {
            continue;
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if let (Some(&ia), Some(&ib)) = (idx.get(&lo), idx.get(&hi)) {
            g.add_edge(ia, ib, (Reverse(w), lo, hi));
        }
    }
    let mut out: Vec<_> = min_spanning_tree(&g)
        .filter_map(|e| match e {
            Element::Edge { source, target, .. } => {
                let (a, b) = (g[petgraph::graph::NodeIndex::new(source)], g[petgraph::graph::NodeIndex::new(target)]);
                Some(if a < b { (a, b) } else { (b, a) })
            }
            _ => None,
        })
        .collect();
    out.sort();
    out
}

/// Linear multi-view triangulation of normalized bearings from camera poses `T_WC`.
pub fn triangulate(views: &[(Pose, Vector3<f64>)]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut a = nalgebra::DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, (t_wc, bearing)) in views.iter().enumerate() {
        let t_cw = t_wc.inverse();
        let mut p = Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&t_cw.rotation());
        p.fixed_view_mut::<3, 1>(0, 3).copy_from(&t_cw.r);
        let x = bearing.x / bearing.z;
        let y = bearing.y / bearing.z;
        let r0 = p.row(2) * x - p.row(0);
        let r1 = p.row(2) * y - p.row(1);
        a.row_mut(2 * k).copy_from(&r0);
        a.row_mut(2 * k + 1).copy_from(&r1);
    }
    // smallest right singular vector via the 4×4 normal matrix
    let ata: SMatrix<f64, 4, 4> = SMatrix::from_iterator((a.transpose() * &a).iter().copied());
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    let hv = eig.eigenvectors.column(imin);
    if hv[3].abs() < 1e-12 {
        return None;
    }
    let p = Vector3::new(hv[0], hv[1], hv[2]) / hv[3];
    p.iter().all(|v| v.is_finite()).then_some(p)
}

impl Estimator {
    pub fn new(cfg: Config, rig: CameraRig, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        rig.validate()?;
        let graph = FactorGraph::new(rig, cfg.imu);
        let loop_state = LoopState::new(cfg.loop_closure.seed);
        Ok(Self {
            cfg,
            mode,
            graph,
            frames: BTreeMap::new(),
            recent: VecDeque::new(),
            keyframes: BTreeSet::new(),
            loop_frames: BTreeSet::new(),
            track_to_lm: BTreeMap::new(),
            lm_to_track: BTreeMap::new(),
            pending: BTreeMap::new(),
            next_landmark: 0,
            imu_buffer: Vec::new(),
            init_accel: Vec::new(),
            leveled: false,
            current_keyframe: None,
            causal: Vec::new(),
            events: Vec::new(),
            timings: Timings::default(),
            loop_state,
            frame_count: 0,
        })
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.graph
    }

    pub fn frames(&self) -> &BTreeMap<FrameId, FrameEntry> {
        &self.frames
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn timings(&self) -> &Timings {
        &self.timings
    }

    /// Per-frame estimates as they were emitted.
    pub fn causal_trajectory(&self) -> &[(FrameId, f64, Pose)] {
        &self.causal
    }

    pub fn loop_frames(&self) -> &BTreeSet<FrameId> {
        &self.loop_frames
    }

    pub fn keyframe_set(&self) -> &BTreeSet<FrameId> {
        &self.keyframes
    }

    pub fn recent_frames(&self) -> Vec<FrameId> {
        self.recent.iter().copied().collect()
    }

    pub fn landmark_track(&self, id: LandmarkId) -> Option<u64> {
        self.lm_to_track.get(&id).copied()
    }

    /// Current estimate of every ingested frame; dropped frames follow their anchor.
    pub fn final_trajectory(&self) -> Vec<(FrameId, f64, Pose)> {
        self.frames
            .values()
            .filter_map(|f| {
                if let Some(s) = self.graph.states.get(&f.id) {
                    return Some((f.id, f.t, s.state.pose()));
                }
                let (anchor, rel) = f.anchor?;
                let a = self.graph.states.get(&anchor)?;
                Some((f.id, f.t, a.state.pose().compose(&rel)))
            })
            .collect()
    }

    fn frames_with_observations(&self) -> BTreeSet<FrameId> {
        self.recent
            .iter()
            .chain(self.keyframes.iter())
            .chain(self.loop_frames.iter())
            .copied()
            .collect()
    }

    pub(crate) fn frame_landmarks(&self, f: FrameId) -> BTreeSet<LandmarkId> {
        self.graph.frame_observations(f).map(|o| o.landmark).collect()
    }

    pub(crate) fn covisibility(&self, a: FrameId, b: FrameId) -> usize {
        let la = self.frame_landmarks(a);
        self.graph
            .frame_observations(b)
            .map(|o| o.landmark)
            .collect::<BTreeSet<_>>()
            .intersection(&la)
            .count()
    }

    fn collect_imu(&mut self, t_prev: Option<f64>, t: f64, imu: &[ImuSample]) -> Result<Vec<ImuSample>> {
        let last_t = self.imu_buffer.last().map(|s| s.t).unwrap_or(f64::NEG_INFINITY);
        for s in imu {
            if s.t > last_t + 1e-12 && s.t > self.imu_buffer.last().map(|b| b.t).unwrap_or(f64::NEG_INFINITY) {
                self.imu_buffer.push(*s);
                if self.init_accel.len() < self.cfg.frontend.init_samples {
                    self.init_accel.push(s.accel);
                }
            }
        }
        let gap_max = self.cfg.frontend.gap_max;
        let Some(t0) = t_prev else {
            return Ok(Vec::new());
        };
        let window: Vec<ImuSample> = {
            let a = self.imu_buffer.partition_point(|s| s.t <= t0 + 1e-9).saturating_sub(1);
            let b = self.imu_buffer.partition_point(|s| s.t < t - 1e-9);
            self.imu_buffer[a..(b + 1).min(self.imu_buffer.len())].to_vec()
        };
        let (Some(first), Some(last)) = (window.first(), window.last()) else {
            return Err(Error::ImuGap { gap: t - t0, max: gap_max });
        };
        let mut worst = (first.t - t0).max(t - last.t).max(0.0);
        for w in window.windows(2) {
            worst = worst.max(w[1].t - w[0].t);
        }
        if worst > gap_max || first.t > t0 + 1e-9 || last.t < t - 1e-9 {
            return Err(Error::ImuGap {
                gap: worst.max(t - last.t).max(first.t - t0),
                max: gap_max,
            });
        }
        let sub = samples_between(&window, t0, t)?;
        // keep the last sample at or before t for the next interval
        let keep = self.imu_buffer.partition_point(|s| s.t <= t + 1e-9).saturating_sub(1);
        self.imu_buffer.drain(..keep);
        Ok(sub)
    }

    /// Processes one frame: IMU propagation, association, keyframe decision,
    /// window maintenance, fixation, optimization, landmark initialization and
    /// (in SLAM mode) loop closure.
    pub fn ingest_frame(&mut self, frame: &FrameInput, imu: &[ImuSample]) -> Result<FrameReport> {
        let total = Instant::now();
        let last = self.recent.back().copied();
        if let Some(l) = last {
            if frame.id <= l || frame.t <= self.frames[&l].t {
                return Err(Error::InvalidInput(format!("frame {} is not after frame {l}", frame.id)));
            }
        }
        for kp in &frame.keypoints {
            if kp.cam >= self.graph.rig.len() {
                return Err(Error::InvalidInput(format!("camera index {} out of range", kp.cam)));
            }
        }
        let stage = Instant::now();
        let t_prev = last.map(|l| self.frames[&l].t);
        let samples = self.collect_imu(t_prev, frame.t, imu)?;
        self.frame_count += 1;

        let first = last.is_none();
        if first {
            let mean = if self.init_accel.is_empty() {
                Vector3::new(0.0, 0.0, self.cfg.imu.g)
            } else {
                self.init_accel.iter().sum::<Vector3<f64>>() / self.init_accel.len() as f64
            };
            self.leveled = self.init_accel.len() >= self.cfg.frontend.init_samples;
            let state = NavState {
                q: roll_pitch_from_accel(&mean),
                ..Default::default()
            };
            self.graph.states.insert(
                frame.id,
                StateVar {
                    t: frame.t,
                    state,
                    pose_fixed: true,
                    speed_bias_fixed: true,
                },
            );
        } else {
            let prev = last.unwrap_or(frame.id);
            if !self.leveled && self.init_accel.len() >= self.cfg.frontend.init_samples {
                self.relevel_first_state();
            }
            let x_prev = self.graph.states[&prev].state;
            let factor = ImuFactor::new(prev, frame.id, samples, &self.cfg.imu, &x_prev.bg, &x_prev.ba)?;
            let x_new = predict(&x_prev, &factor.preint, &self.cfg.imu);
            self.graph.states.insert(
                frame.id,
                StateVar {
                    t: frame.t,
                    state: x_new,
                    pose_fixed: false,
                    speed_bias_fixed: false,
                },
            );
            self.graph.imu_factors.insert(prev, factor);
        }
        self.timings.record("imu", stage);

        let stage = Instant::now();
        let matched = self.associate(frame);
        self.frames.insert(
            frame.id,
            FrameEntry {
                id: frame.id,
                t: frame.t,
                is_keyframe: false,
                set: FrameSet::Recent,
                in_loop: false,
                tracks: frame.keypoints.iter().map(|k| k.track).collect(),
                anchor: None,
            },
        );
        self.timings.record("match", stage);

        let stage = Instant::now();
        let is_kf = first || self.keyframe_decision(frame, &matched);
        if let Some(e) = self.frames.get_mut(&frame.id) {
            e.is_keyframe = is_kf;
        }
        self.timings.record("keyframe", stage);

        let stage = Instant::now();
        self.recent.push_back(frame.id);
        self.maintain_window()?;
        self.timings.record("maintain", stage);

        self.update_fixation(frame.t);

        let stage = Instant::now();
        let report = optimize(&mut self.graph, &self.cfg.solver);
        if self.graph.states.values().any(|s| !s.state.r.iter().all(|v| v.is_finite())) {
            return Err(Error::Diverged);
        }
        self.relinearize_imu()?;
        self.timings.record("optimize", stage);

        let stage = Instant::now();
        self.triangulate_pending(frame.id);
        self.timings.record("triangulate", stage);

        if self.mode == Mode::Slam {
            let stage = Instant::now();
            self.loop_step(frame.id, &frame.keypoints)?;
            self.timings.record("loop", stage);
        }

        let pose = self.graph.states[&frame.id].state.pose();
        self.causal.push((frame.id, frame.t, pose));
        self.timings.record("total", total);
        Ok(FrameReport {
            frame: frame.id,
            pose,
            is_keyframe: is_kf,
            optimization: report,
        })
    }

    fn relevel_first_state(&mut self) {
        let n = self.cfg.frontend.init_samples.min(self.init_accel.len());
        let mean = self.init_accel[..n].iter().sum::<Vector3<f64>>() / n as f64;
        if let Some((_, s)) = self.graph.states.iter_mut().next() {
            s.state.q = roll_pitch_from_accel(&mean);
        }
        self.leveled = true;
    }

    /// Adds observations of known landmarks; unknown tracks become pending.
    fn associate(&mut self, frame: &FrameInput) -> Vec<bool> {
        let pose = self.graph.states[&frame.id].state.pose();
        let weight = pixel_weight(self.cfg.frontend.pixel_sigma);
        let gate = self.cfg.frontend.match_gate_px;
        let mut matched = Vec::with_capacity(frame.keypoints.len());
        for kp in &frame.keypoints {
            let lm = self.track_to_lm.get(&kp.track).copied().filter(|id| self.graph.landmarks.contains_key(id));
            match lm {
                Some(id) => {
                    let l = self.graph.landmarks[&id].position;
                    let ok = project_world(&self.graph.rig, kp.cam, &pose, &l).is_some_and(|uv| (uv - kp.uv).norm() <= gate);
                    if ok {
                        self.graph.add_observation(ReprojectionFactor {
                            cam: kp.cam,
                            landmark: id,
                            frame: frame.id,
                            measurement: kp.uv,
                            weight,
                        });
                    }
                    matched.push(ok);
                }
                None => {
                    self.pending.entry(kp.track).or_default().push((frame.id, kp.cam, kp.uv));
                    matched.push(false);
                }
            }
        }
        matched
    }

    /// `o = min(o_l, max_k o_k) < t_o`; also updates the current keyframe.
    fn keyframe_decision(&mut self, frame: &FrameInput, matched: &[bool]) -> bool {
        let w = &self.cfg.window;
        let o_l = overlap_fraction(&self.graph.rig, &frame.keypoints, matched, w.r_kpt, w.raster_scale);
        let candidates: Vec<FrameId> = self
            .keyframes
            .iter()
            .chain(self.recent.iter())
            .copied()
            .filter(|k| *k != frame.id && self.frames.get(k).is_some_and(|e| e.is_keyframe))
            .collect();
        if candidates.is_empty() {
            self.current_keyframe = None;
            return true;
        }
        let mut best = (f64::NEG_INFINITY, candidates[0]);
        for k in candidates {
            let tracks = &self.frames[&k].tracks;
            let in_k: Vec<bool> = frame
                .keypoints
                .iter()
                .zip(matched)
                .map(|(kp, m)| *m && tracks.contains(&kp.track))
                .collect();
            let o_k = overlap_fraction(&self.graph.rig, &frame.keypoints, &in_k, w.r_kpt, w.raster_scale);
            if o_k > best.0 {
                best = (o_k, k);
            }
        }
        self.current_keyframe = Some(best.1);
        o_l.min(best.0) < w.t_o
    }

    fn maintain_window(&mut self) -> Result<()> {
        while self.recent.len() > self.cfg.window.recent {
            let Some(f) = self.recent.pop_front() else { break };
            if self.frames[&f].is_keyframe {
                self.keyframes.insert(f);
                if let Some(e) = self.frames.get_mut(&f) {
                    e.set = FrameSet::Keyframe;
                }
            } else {
                self.drop_frame(f)?;
            }
        }
        if self.keyframes.len() > self.cfg.window.max_keyframes {
            if let Some(r) = self.select_for_demotion(&self.keyframes.clone()) {
                self.demote(r);
            }
        }
        Ok(())
    }

    /// Removes a non-keyframe, merging the IMU factors on either side.
    fn drop_frame(&mut self, f: FrameId) -> Result<()> {
        let prev = self.graph.states.range(..f).next_back().map(|(k, _)| *k);
        let next = self.graph.states.range(f..).nth(1).map(|(k, _)| *k);
        let pose_f = self.graph.states[&f].state.pose();
        match (prev, next) {
            (Some(p), Some(_)) => {
                let a = self.graph.imu_factors.remove(&p);
                let b = self.graph.imu_factors.remove(&f);
                if let (Some(a), Some(b)) = (a, b) {
                    let x = self.graph.states[&p].state;
                    let merged = a.merge(&b, &self.cfg.imu, &x.bg, &x.ba)?;
                    self.graph.imu_factors.insert(p, merged);
                }
            }
            (Some(p), None) => {
                self.graph.imu_factors.remove(&p);
            }
            (None, _) => {
                self.graph.imu_factors.remove(&f);
            }
        }
        self.graph.remove_frame_observations(f);
        self.graph.states.remove(&f);
        if let Some(e) = self.frames.get_mut(&f) {
            e.set = FrameSet::Dropped;
            e.anchor = prev.map(|p| (p, self.graph.states[&p].state.pose().inverse().compose(&pose_f)));
        }
        self.cleanup_landmarks();
        Ok(())
    }

    /// Candidate with the least co-visibility with the current frame or current
    /// keyframe; the oldest keyframe is kept while it still shares landmarks.
    pub(crate) fn select_for_demotion(&self, candidates: &BTreeSet<FrameId>) -> Option<FrameId> {
        let current = self.recent.back().copied();
        let kf = self.current_keyframe;
        let oldest = self.keyframes.iter().next().copied();
        let mut best: Option<(usize, FrameId)> = None;
        for &k in candidates {
            if Some(k) == kf {
                continue;
            }
            let score = current
                .map(|c| self.covisibility(k, c))
                .unwrap_or(0)
                .max(kf.map(|c| self.covisibility(k, c)).unwrap_or(0));
            if Some(k) == oldest && score > 0 && candidates.len() > 1 {
                continue;
            }
            if best.is_none_or(|(s, _)| score < s) {
                best = Some((score, k));
            }
        }
        best.map(|(_, k)| k)
    }

    pub(crate) fn demote(&mut self, r: FrameId) {
        self.create_posegraph_edges(r);
        self.keyframes.remove(&r);
        self.loop_frames.remove(&r);
        if let Some(e) = self.frames.get_mut(&r) {
            e.set = FrameSet::Posegraph;
            e.in_loop = false;
        }
        self.graph.remove_frame_observations(r);
        self.cleanup_landmarks();
    }

    /// Creates the two-pose factors incident to `r` along a maximum spanning
    /// tree over co-observation counts. Returns the created edge keys.
    pub fn create_posegraph_edges(&mut self, r: FrameId) -> Vec<(FrameId, FrameId)> {
        let with_obs = self.frames_with_observations();
        let has_edge: BTreeSet<FrameId> = self.graph.edges.keys().flat_map(|(a, b)| [*a, *b]).collect();
        let mut set: BTreeSet<FrameId> = with_obs.iter().filter(|f| has_edge.contains(f)).copied().collect();
        set.insert(r);
        let lm_r = self.frame_landmarks(r);
        let mut best: Option<(usize, FrameId)> = None;
        for &f in &with_obs {
            if f == r {
                continue;
            }
            let c = self.graph.frame_observations(f).filter(|o| lm_r.contains(&o.landmark)).map(|o| o.landmark).collect::<BTreeSet<_>>().len();
            if c > 0 && best.is_none_or(|(b, _)| c > b) {
                best = Some((c, f));
            }
        }
        if let Some((_, f)) = best {
            set.insert(f);
        }
        let nodes: Vec<FrameId> = set.iter().copied().collect();
        let lms: BTreeMap<FrameId, BTreeSet<LandmarkId>> = nodes.iter().map(|f| (*f, self.frame_landmarks(*f))).collect();
        let mut weights = BTreeMap::new();
        for (i, a) in nodes.iter().enumerate() {
            for b in &nodes[i + 1..] {
                let w = lms[a].intersection(&lms[b]).count();
                if w > 0 {
                    weights.insert((*a, *b), w);
                }
            }
        }
        let mst = maximum_spanning_tree(&nodes, &weights);
        let mut created = Vec::new();
        for (a, b) in mst {
            if a != r && b != r {
                continue;
            }
            let c = if a == r { b } else { a };
            if self.graph.edges.contains_key(&(r, c)) {
                continue;
            }
            let obs: Vec<ReprojectionFactor> = self
                .graph
                .frame_observations(r)
                .cloned()
                .chain(self.graph.frame_observations(c).filter(|o| lm_r.contains(&o.landmark)).cloned())
                .collect();
            let landmarks: BTreeMap<LandmarkId, Vector3<f64>> = obs
                .iter()
                .filter_map(|o| self.graph.landmarks.get(&o.landmark).map(|l| (o.landmark, l.position)))
                .collect();
            let t_r = self.graph.states[&r].state.pose();
            let t_c = self.graph.states[&c].state.pose();
            if let Ok(f) = make_two_pose_factor(r, c, &obs, &landmarks, &t_r, &t_c, &self.graph.rig, &self.cfg.marginal) {
                self.graph.edges.insert((r, c), f);
                created.push((r, c));
            }
        }
        created
    }

    /// Drops landmarks without observations and pending entries of frames
    /// that no longer carry observations.
    pub(crate) fn cleanup_landmarks(&mut self) {
        let counts = self.graph.landmark_observation_counts();
        let removed: Vec<LandmarkId> = self.graph.landmarks.keys().filter(|id| !counts.contains_key(id)).copied().collect();
        for id in removed {
            self.graph.landmarks.remove(&id);
            if let Some(track) = self.lm_to_track.get(&id) {
                if self.track_to_lm.get(track) == Some(&id) {
                    self.track_to_lm.remove(track);
                }
            }
        }
        let live = self.frames_with_observations();
        self.pending.retain(|_, v| {
            v.retain(|(f, _, _)| live.contains(f));
            !v.is_empty()
        });
    }

    /// Number of variable states, `A = max(A_min, A_ΔT)`.
    pub fn variable_count(&self, now: f64) -> usize {
        let a_dt = self.graph.states.values().filter(|s| s.t >= now - self.cfg.window.delta_t - 1e-9).count();
        self.cfg.window.a_min.max(a_dt)
    }

    fn expected_variable(&self, now: f64) -> Vec<FrameId> {
        let a = self.variable_count(now);
        let n = self.graph.states.len();
        let oldest = self.graph.states.keys().next().copied();
        self.graph
            .states
            .keys()
            .skip(n.saturating_sub(a))
            .filter(|f| Some(**f) != oldest && !self.loop_frames.contains(f))
            .copied()
            .collect()
    }

    pub(crate) fn update_fixation(&mut self, now: f64) {
        let variable: BTreeSet<FrameId> = self.expected_variable(now).into_iter().collect();
        for (id, s) in self.graph.states.iter_mut() {
            let fixed = !variable.contains(id);
            s.pose_fixed = fixed;
            s.speed_bias_fixed = fixed;
        }
    }

    fn relinearize_imu(&mut self) -> Result<()> {
        for f in self.graph.imu_factors.values_mut() {
            let x = &self.graph.states[&f.from];
            if x.speed_bias_fixed {
                continue;
            }
            let dbg = (x.state.bg - f.preint.bg_lin).norm();
            let dba = (x.state.ba - f.preint.ba_lin).norm();
            if dbg > 5e-3 || dba > 5e-2 {
                f.repropagate(&self.cfg.imu, &x.state.bg, &x.state.ba)?;
            }
        }
        Ok(())
    }

    pub(crate) fn take_pending(&mut self, track: u64) -> Option<Vec<(FrameId, usize, Vector2<f64>)>> {
        self.pending.remove(&track)
    }

    pub(crate) fn new_landmark(&mut self, track: u64, position: Vector3<f64>) -> LandmarkId {
        let id = LandmarkId(self.next_landmark);
        self.next_landmark += 1;
        self.graph.landmarks.insert(id, LandmarkVar { position, fixed: false });
        self.track_to_lm.insert(track, id);
        self.lm_to_track.insert(id, track);
        id
    }

    fn triangulate_pending(&mut self, _current: FrameId) {
        let fe = self.cfg.frontend;
        let weight = pixel_weight(fe.pixel_sigma);
        let tracks: Vec<u64> = self.pending.iter().filter(|(_, v)| v.len() >= 2).map(|(k, _)| *k).collect();
        for track in tracks {
            let mut views = self.pending[&track].clone();
            loop {
                match self.try_triangulate(&views) {
                    Ok(p) => {
                        let id = self.new_landmark(track, p);
                        for (f, cam, uv) in &views {
                            self.graph.add_observation(ReprojectionFactor {
                                cam: *cam,
                                landmark: id,
                                frame: *f,
                                measurement: *uv,
                                weight,
                            });
                        }
                        self.pending.remove(&track);
                        break;
                    }
                    Err(Some(worst)) if views.len() > 2 => {
                        views.remove(worst);
                    }
                    Err(_) => break,
                }
            }
        }
    }

    /// `Err(Some(i))` names the view with the largest reprojection error when
    /// the gate fails; `Err(None)` means too little parallax or bad geometry.
    fn try_triangulate(&self, views: &[(FrameId, usize, Vector2<f64>)]) -> std::result::Result<Vector3<f64>, Option<usize>> {
        let fe = &self.cfg.frontend;
        let rig = &self.graph.rig;
        let mut rays = Vec::with_capacity(views.len());
        for (f, cam, uv) in views {
            let Some(s) = self.graph.states.get(f) else {
                return Err(None);
            };
            let t_wc = s.state.pose().compose(&rig.extrinsics[*cam]);
            rays.push((t_wc, rig.cameras[*cam].backproject(uv)));
        }
        let mut max_angle: f64 = 0.0;
        for i in 0..rays.len() {
            for j in i + 1..rays.len() {
                let a = rays[i].0.q * rays[i].1;
                let b = rays[j].0.q * rays[j].1;
                max_angle = max_angle.max(a.angle(&b));
            }
        }
        if max_angle.to_degrees() < fe.min_parallax_deg {
            return Err(None);
        }
        let p = triangulate(&rays).ok_or(None)?;
        let mut worst = (0.0, 0usize);
        for (i, (f, cam, uv)) in views.iter().enumerate() {
            let pose = self.graph.states[f].state.pose();
            let depth = rays[i].0.inverse().transform(&p).z;
            if depth < fe.min_depth {
                return Err(None);
            }
            match reprojection_error(rig, *cam, &pose, &p, uv) {
                Some(ev) => {
                    let e = ev.error.norm();
                    if e > worst.0 {
                        worst = (e, i);
                    }
                }
                None => return Err(None),
            }
        }
        if worst.0 > fe.triangulation_gate_sigma * fe.pixel_sigma.max(1e-3) {
            return Err(Some(worst.1));
        }
        Ok(p)
    }

    pub fn window_stats(&self) -> WindowStats {
        let frame = self.recent.back().copied().unwrap_or(FrameId(0));
        let now = self.frames.get(&frame).map(|f| f.t).unwrap_or(0.0);
        WindowStats {
            frame,
            recent: self.recent.len(),
            keyframes: self.keyframes.len(),
            loop_frames: self.loop_frames.len(),
            posegraph: self.frames.values().filter(|f| f.set == FrameSet::Posegraph).count(),
            states: self.graph.states.len(),
            a: self.variable_count(now),
            variable_states: self.graph.states.iter().filter(|(_, s)| !s.pose_fixed).map(|(k, _)| *k).collect(),
            expected_variable: self.expected_variable(now),
            is_keyframe: self.frames.get(&frame).is_some_and(|f| f.is_keyframe),
        }
    }

    /// Every frame is in exactly one of recent / K / P (or dropped); `L ⊆ P ∪ K`.
    pub fn check_membership(&self) -> Result<()> {
        for f in self.frames.values() {
            let in_recent = self.recent.contains(&f.id);
            let in_k = self.keyframes.contains(&f.id);
            let in_p = f.set == FrameSet::Posegraph;
            let n = in_recent as u8 + in_k as u8 + in_p as u8;
            let dropped = f.set == FrameSet::Dropped;
            if (dropped && n != 0) || (!dropped && n != 1) {
                return Err(Error::InvalidInput(format!("frame {} has inconsistent set membership", f.id)));
            }
            if self.loop_frames.contains(&f.id) && in_recent {
                return Err(Error::InvalidInput(format!("recent frame {} is a loop frame", f.id)));
            }
        }
        let ids: Vec<_> = self.graph.states.keys().copied().collect();
        for w in ids.windows(2) {
            let ok = self.graph.imu_factors.get(&w[0]).is_some_and(|f| f.to == w[1]);
            if !ok {
                return Err(Error::InvalidInput(format!("IMU chain broken between {} and {}", w[0], w[1])));
            }
        }
        if self.graph.imu_factors.len() + 1 != ids.len().max(1) {
            return Err(Error::InvalidInput("dangling IMU factor".into()));
        }
        // P frames carry no observations unless they are loop frames
        for f in self.frames.values().filter(|f| f.set == FrameSet::Posegraph && !self.loop_frames.contains(&f.id)) {
            if self.graph.frame_observations(f.id).next().is_some() {
                return Err(Error::InvalidInput(format!("posegraph frame {} still has observations", f.id)));
            }
        }
        Ok(())
    }

    /// Waits for background work and imports its result.
    pub fn finish(&mut self) -> Result<()> {
        if self.mode == Mode::Slam {
            self.finish_loop_job()?;
        }
        Ok(())
    }
}
