//! Loop closure: oracle place recognition, 3D-2D verification, relocalization
//! with edge revival, loop-error distribution and the background full-graph
//! optimization with its synchronization step.

use std::collections::{BTreeMap, BTreeSet};
use std::thread::JoinHandle;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_weight, reprojection_error, ReprojectionFactor};
use crate::error::{Error, Result};
use crate::estimator::{Estimator, FrameSet};
use crate::geometry::{exp, log, yaw, yaw_rotation, Pose};
use crate::imu::NavState;
use crate::marginal::revive;
use crate::solver::{optimize, FactorGraph, LandmarkVar, ObsKey, OptReport, SolverOptions, StateVar};
use crate::{FrameId, LandmarkId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Minimum number of shared landmark ids for a candidate.
    pub min_shared: usize,
    /// Candidates must be at least this many frames older than the query.
    pub recent_exclusion: u64,
    pub false_negative_rate: f64,
    pub seed: u64,
    /// Inlier threshold in units of the pixel σ.
    pub inlier_sigma: f64,
    pub min_inliers: usize,
    pub min_inlier_ratio: f64,
    /// Largest accepted relocalization translation [m].
    pub max_correction_m: f64,
    /// Largest accepted relocalization yaw [deg].
    pub max_correction_deg: f64,
    /// A background optimization starts only above this correction [m].
    pub job_threshold_m: f64,
    /// The background job is joined this many frames after it started.
    pub job_delay_frames: u64,
    /// Frames between two closures.
    pub min_interval: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            min_shared: 15,
            recent_exclusion: 20,
            false_negative_rate: 0.0,
            seed: 0,
            inlier_sigma: 3.0,
            min_inliers: 10,
            min_inlier_ratio: 0.5,
            max_correction_m: 1.0,
            max_correction_deg: 15.0,
            job_threshold_m: 0.0,
            job_delay_frames: 5,
            min_interval: 10,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.false_negative_rate)
            && (0.0..=1.0).contains(&self.min_inlier_ratio)
            && self.inlier_sigma > 0.0
            && self.max_correction_m > 0.0
            && self.max_correction_deg > 0.0
            && self.job_threshold_m >= 0.0
            && self.min_shared > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid loop closure parameters".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    LoopDetected,
    LoopVerified,
    LoopRejected,
    JobStarted,
    JobDone,
    JobFailed,
    Imported,
    LoopFramePruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub frame: FrameId,
    pub event: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loop_frame: Option<FrameId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl Event {
    fn new(frame: FrameId, event: EventKind) -> Self {
        Self {
            frame,
            event,
            loop_frame: None,
            count: None,
            value: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopCandidate {
    pub query: FrameId,
    pub matched: FrameId,
    /// Shared landmark (track) ids.
    pub shared: Vec<u64>,
    pub verified: bool,
    pub inliers: usize,
    pub correspondences: usize,
    /// Query pose implied by the archived landmarks.
    pub solved_pose: Option<Pose>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JobStatus {
    Running,
    Done,
    Imported,
}

pub struct LoopJob {
    pub loop_frame: FrameId,
    pub started: FrameId,
    pub join_at: u64,
    pub status: JobStatus,
    handle: Option<JoinHandle<(FactorGraph, OptReport)>>,
}

pub struct LoopState {
    rng: ChaCha8Rng,
    pub(crate) job: Option<LoopJob>,
    last_closure: Option<u64>,
}

impl LoopState {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            job: None,
            last_closure: None,
        }
    }
}

/// Spreads the discrepancy between the last pose of `chain` and `target` over
/// the chain: pose `k` of `n` is rotated by `Exp(Log(δq)·k/n)` (rotating the
/// segments ending at it), then shifted by `k/n` of the remaining position gap.
pub fn distribute_loop_error(chain: &[Pose], target: &Pose) -> Result<Vec<Pose>> {
    if chain.len() < 2 {
        return Err(Error::InvalidInput("loop chain needs at least two poses".into()));
    }
    let n = (chain.len() - 1) as f64;
    let last = chain[chain.len() - 1];
    let dq = target.q * last.q.inverse();
    let phi = log(&dq);
    if phi.norm() >= std::f64::consts::PI - 1e-12 {
        return Err(Error::AmbiguousLoop(phi.norm()));
    }
    let mut out = Vec::with_capacity(chain.len());
    out.push(chain[0]);
    let mut r = chain[0].r;
    for k in 1..chain.len() {
        let rot = exp(&(phi * (k as f64 / n)));
        r += rot * (chain[k].r - chain[k - 1].r);
        out.push(Pose::new(r, crate::geometry::canonical(rot * chain[k].q)));
    }
    let gap = target.r - out[out.len() - 1].r;
    for (k, p) in out.iter_mut().enumerate() {
        p.r += gap * (k as f64 / n);
    }
    let end = out.len() - 1;
    out[end].q = target.q;
    Ok(out)
}

/// Closing residual `target ⊟ last`.
pub fn loop_residual(chain: &[Pose], target: &Pose) -> f64 {
    chain.last().map(|p| target.box_minus(p).norm()).unwrap_or(f64::INFINITY)
}

/// Yaw and translation of `T_new · T_cur⁻¹` as a gravity-preserving transform.
pub fn four_dof_correction(current: &Pose, solved: &Pose) -> Pose {
    let dq = solved.q * current.q.inverse();
    let q = yaw_rotation(yaw(&dq));
    Pose::new(solved.r - q * current.r, q)
}

/// Robust 3D-2D pose solve from fixed world points.
pub fn solve_pose(
    rig: &crate::camera::CameraRig,
    initial: &Pose,
    points: &[(usize, Vector3<f64>, Vector2<f64>)],
    pixel_sigma: f64,
) -> Pose {
    let mut g = FactorGraph::new(rig.clone(), Default::default());
    g.states.insert(
        FrameId(0),
        StateVar {
            t: 0.0,
            state: NavState {
                r: initial.r,
                q: initial.q,
                ..Default::default()
            },
            pose_fixed: false,
            speed_bias_fixed: true,
        },
    );
    for (i, (cam, p, uv)) in points.iter().enumerate() {
        let id = LandmarkId(i as u64);
        g.landmarks.insert(id, LandmarkVar { position: *p, fixed: true });
        g.add_observation(ReprojectionFactor {
            cam: *cam,
            landmark: id,
            frame: FrameId(0),
            measurement: *uv,
            weight: pixel_weight(pixel_sigma),
        });
    }
    let opts = SolverOptions {
        max_iterations: 30,
        ..Default::default()
    };
    optimize(&mut g, &opts);
    g.states[&FrameId(0)].state.pose()
}

fn rigid_delta(old: &Pose, new: &Pose) -> Pose {
    new.compose(&old.inverse())
}

impl Estimator {
    /// Oracle recognition over track ids against fixed posegraph frames.
    pub fn recognize(&mut self, query: FrameId) -> Option<LoopCandidate> {
        let cfg = self.cfg.loop_closure;
        let q_tracks = self.frames.get(&query)?.tracks.clone();
        // tracks whose landmark is already tied to a fixed loop frame are closed
        let loop_lms: BTreeSet<LandmarkId> = self
            .loop_frames
            .iter()
            .flat_map(|f| self.graph.frame_observations(*f).map(|o| o.landmark))
            .collect();
        let anchored: BTreeSet<u64> = q_tracks
            .iter()
            .filter(|t| self.track_to_lm.get(t).is_some_and(|lm| loop_lms.contains(lm)))
            .copied()
            .collect();
        let with_edges: BTreeSet<FrameId> = self.graph.edges.keys().flat_map(|(a, b)| [*a, *b]).collect();
        let mut best: Option<(usize, FrameId, Vec<u64>)> = None;
        for f in self.frames.values() {
            if f.set != FrameSet::Posegraph || f.in_loop || f.id.0 + cfg.recent_exclusion > query.0 || !with_edges.contains(&f.id) {
                continue;
            }
            if self.graph.states.get(&f.id).is_none_or(|s| !s.pose_fixed) {
                continue;
            }
            let shared: Vec<u64> = f.tracks.intersection(&q_tracks).filter(|t| !anchored.contains(t)).copied().collect();
            if shared.len() >= cfg.min_shared && best.as_ref().is_none_or(|(n, _, _)| shared.len() >= *n) {
                best = Some((shared.len(), f.id, shared));
            }
        }
        let (_, matched, shared) = best?;
        if cfg.false_negative_rate > 0.0 && self.loop_state.rng.random::<f64>() < cfg.false_negative_rate {
            return None;
        }
        Some(LoopCandidate {
            query,
            matched,
            shared,
            verified: false,
            inliers: 0,
            correspondences: 0,
            solved_pose: None,
        })
    }

    /// Landmarks archived in the edges incident to `l`, in world coordinates.
    pub fn archived_landmarks(&self, l: FrameId) -> BTreeMap<LandmarkId, Vector3<f64>> {
        let mut out = BTreeMap::new();
        for ((r, c), e) in &self.graph.edges {
            if *r != l && *c != l {
                continue;
            }
            let t_wr = self.graph.states[&e.ref_frame].state.pose();
            for (id, p) in &e.archive.landmarks_sr {
                out.entry(*id).or_insert_with(|| t_wr.transform(p));
            }
        }
        out
    }

    /// 3D-2D verification: solve the query pose from archived landmarks and
    /// count reprojection inliers. The implied correction must pass the drift gate.
    pub fn verify(&self, cand: &mut LoopCandidate, keypoints: &[crate::estimator::Keypoint]) {
        let cfg = self.cfg.loop_closure;
        let sigma = self.cfg.frontend.pixel_sigma;
        let archived = self.archived_landmarks(cand.matched);
        let by_track: BTreeMap<u64, Vector3<f64>> = archived
            .iter()
            .filter_map(|(id, p)| self.lm_to_track.get(id).map(|t| (*t, *p)))
            .collect();
        let shared: BTreeSet<u64> = cand.shared.iter().copied().collect();
        let points: Vec<(usize, Vector3<f64>, Vector2<f64>)> = keypoints
            .iter()
            .filter(|k| shared.contains(&k.track))
            .filter_map(|k| by_track.get(&k.track).map(|p| (k.cam, *p, k.uv)))
            .collect();
        cand.correspondences = points.len();
        if points.len() < cfg.min_inliers {
            return;
        }
        let current = self.graph.states[&cand.query].state.pose();
        let solved = solve_pose(&self.graph.rig, &current, &points, sigma);
        let gate = cfg.inlier_sigma * sigma;
        cand.inliers = points
            .iter()
            .filter(|(cam, p, uv)| reprojection_error(&self.graph.rig, *cam, &solved, p, uv).is_some_and(|e| e.error.norm() <= gate))
            .count();
        let corr = four_dof_correction(&current, &solved);
        let drift_ok = corr.r.norm() <= cfg.max_correction_m && yaw(&corr.q).abs().to_degrees() <= cfg.max_correction_deg;
        let ratio = cand.inliers as f64 / points.len() as f64;
        cand.verified = drift_ok && cand.inliers >= cfg.min_inliers && ratio >= cfg.min_inlier_ratio;
        cand.solved_pose = Some(solved);
    }

    /// Applies a left world-frame transform to a state and returns the delta.
    fn move_state(&mut self, f: FrameId, t: &Pose) {
        if let Some(s) = self.graph.states.get_mut(&f) {
            s.state = s.state.transformed(t);
        }
    }

    /// Moves landmarks with their newest observing frame.
    fn move_landmarks(&mut self, deltas: &BTreeMap<FrameId, Pose>) {
        let mut newest: BTreeMap<LandmarkId, FrameId> = BTreeMap::new();
        for o in self.graph.observations.values() {
            let e = newest.entry(o.landmark).or_insert(o.frame);
            if o.frame > *e {
                *e = o.frame;
            }
        }
        for (lm, f) in newest {
            if let (Some(d), Some(l)) = (deltas.get(&f), self.graph.landmarks.get_mut(&lm)) {
                l.position = d.transform(&l.position);
            }
        }
    }

    /// Re-aligns the window to the matched frame, distributes the error over
    /// the fixed chain back to `l`, revives the edges incident to `l` and
    /// merges duplicated landmarks. Returns the applied correction.
    pub fn relocalize(&mut self, cand: &LoopCandidate) -> Result<Pose> {
        if !cand.verified {
            return Err(Error::InvalidInput("loop candidate is not verified".into()));
        }
        let l = cand.matched;
        let solved = cand.solved_pose.ok_or_else(|| Error::InvalidInput("candidate has no pose".into()))?;
        let current = self.graph.states[&cand.query].state.pose();
        let corr = four_dof_correction(&current, &solved);

        let mut deltas: BTreeMap<FrameId, Pose> = BTreeMap::new();
        let variable: Vec<FrameId> = self.graph.states.iter().filter(|(_, s)| !s.pose_fixed).map(|(k, _)| *k).collect();
        for f in &variable {
            self.move_state(*f, &corr);
            deltas.insert(*f, corr);
        }
        let chain_ids: Vec<FrameId> = self
            .graph
            .states
            .range(l..)
            .filter(|(_, s)| s.pose_fixed)
            .map(|(k, _)| *k)
            .collect();
        if chain_ids.len() >= 2 {
            let chain: Vec<Pose> = chain_ids.iter().map(|f| self.graph.states[f].state.pose()).collect();
            let target = corr.compose(&chain[chain.len() - 1]);
            let moved = distribute_loop_error(&chain, &target)?;
            for (f, (old, new)) in chain_ids.iter().zip(chain.iter().zip(&moved)) {
                let d = rigid_delta(old, new);
                self.move_state(*f, &d);
                deltas.insert(*f, d);
            }
        }
        self.move_landmarks(&deltas);

        // revival
        let keys: Vec<(FrameId, FrameId)> = self.graph.edges.keys().filter(|(a, b)| *a == l || *b == l).copied().collect();
        let mut revived_obs = Vec::new();
        let mut revived_lms: BTreeMap<LandmarkId, Vector3<f64>> = BTreeMap::new();
        for k in keys {
            let Some(mut e) = self.graph.edges.remove(&k) else { continue };
            let t_wr = self.graph.states[&e.ref_frame].state.pose();
            let (obs, lms) = revive(&mut e, &t_wr)?;
            revived_obs.extend(obs);
            for (id, p) in lms {
                revived_lms.entry(id).or_insert(p);
            }
        }
        let weight = pixel_weight(self.cfg.frontend.pixel_sigma);
        for (old_id, p) in &revived_lms {
            if self.graph.landmarks.contains_key(old_id) {
                continue;
            }
            self.graph.landmarks.insert(*old_id, LandmarkVar { position: *p, fixed: false });
            let Some(&track) = self.lm_to_track.get(old_id) else { continue };
            if let Some(new_id) = self.track_to_lm.get(&track).copied().filter(|n| n != old_id) {
                self.merge_landmark(new_id, *old_id);
            }
            self.track_to_lm.insert(track, *old_id);
            if let Some(pend) = self.take_pending(track) {
                for (f, cam, uv) in pend {
                    self.graph.add_observation(ReprojectionFactor {
                        cam,
                        landmark: *old_id,
                        frame: f,
                        measurement: uv,
                        weight,
                    });
                }
            }
        }
        let mut touched = BTreeSet::new();
        for o in revived_obs {
            if self.graph.states.contains_key(&o.frame) && self.graph.landmarks.contains_key(&o.landmark) {
                touched.insert(o.frame);
                self.graph.observations.entry(ObsKey::of(&o)).or_insert(o);
            }
        }
        let active: BTreeSet<FrameId> = self.recent.iter().chain(self.keyframes.iter()).copied().collect();
        for f in touched {
            if !active.contains(&f) {
                self.loop_frames.insert(f);
                if let Some(e) = self.frames.get_mut(&f) {
                    e.in_loop = true;
                }
            }
        }
        let now = self.frames[&cand.query].t;
        self.update_fixation(now);
        Ok(corr)
    }

    /// Moves all observations of `from` to `into` and removes `from`.
    pub(crate) fn merge_landmark(&mut self, from: LandmarkId, into: LandmarkId) {
        let keys: Vec<ObsKey> = self.graph.observations.keys().filter(|k| k.landmark == from).copied().collect();
        for k in keys {
            if let Some(mut o) = self.graph.observations.remove(&k) {
                o.landmark = into;
                self.graph.observations.entry(ObsKey::of(&o)).or_insert(o);
            }
        }
        self.graph.landmarks.remove(&from);
    }

    /// Demotes loop frames until `|L| ≤ L_max`.
    pub fn prune_loop_frames(&mut self) {
        while self.loop_frames.len() > self.cfg.window.max_loop_frames {
            let cands = self.loop_frames.clone();
            let Some(r) = self.select_for_demotion(&cands) else { break };
            self.demote(r);
            let frame = self.recent.back().copied().unwrap_or(r);
            self.events.push(Event {
                loop_frame: Some(r),
                ..Event::new(frame, EventKind::LoopFramePruned)
            });
        }
    }

    fn start_job(&mut self, l: FrameId, query: FrameId) {
        let mut copy = self.graph.clone();
        let t_l = copy.states[&l].t;
        for s in copy.states.values_mut() {
            let fixed = s.t < t_l;
            s.pose_fixed = fixed;
            s.speed_bias_fixed = fixed;
        }
        if let Some((_, first)) = copy.states.iter_mut().next() {
            first.pose_fixed = true;
            first.speed_bias_fixed = true;
        }
        let opts = self.cfg.loop_solver;
        let handle = std::thread::spawn(move || {
            let report = optimize(&mut copy, &opts);
            (copy, report)
        });
        self.loop_state.job = Some(LoopJob {
            loop_frame: l,
            started: query,
            join_at: self.frame_count + self.cfg.loop_closure.job_delay_frames,
            status: JobStatus::Running,
            handle: Some(handle),
        });
        self.events.push(Event {
            loop_frame: Some(l),
            ..Event::new(query, EventKind::JobStarted)
        });
    }

    /// Overwrites shared states and landmarks with the job result and
    /// re-aligns everything newer by the change of the newest shared state.
    pub fn import_result(&mut self, job: &FactorGraph) {
        let shared: Vec<FrameId> = self.graph.states.keys().filter(|k| job.states.contains_key(k)).copied().collect();
        let Some(&newest) = shared.last() else { return };
        let delta = rigid_delta(&self.graph.states[&newest].state.pose(), &job.states[&newest].state.pose());
        for (id, s) in self.graph.states.iter_mut() {
            match job.states.get(id) {
                Some(js) => s.state = js.state,
                None => s.state = s.state.transformed(&delta),
            }
        }
        for (id, l) in self.graph.landmarks.iter_mut() {
            match job.landmarks.get(id) {
                Some(jl) => l.position = jl.position,
                None => l.position = delta.transform(&l.position),
            }
        }
    }

    fn join_job(&mut self) -> Result<()> {
        let Some(mut job) = self.loop_state.job.take() else { return Ok(()) };
        let frame = self.recent.back().copied().unwrap_or(job.started);
        let Some(handle) = job.handle.take() else { return Ok(()) };
        let (graph, report) = handle.join().map_err(|_| Error::Diverged)?;
        job.status = JobStatus::Done;
        if report.diverged {
            self.events.push(Event {
                loop_frame: Some(job.loop_frame),
                ..Event::new(frame, EventKind::JobFailed)
            });
            return Ok(());
        }
        self.events.push(Event {
            loop_frame: Some(job.loop_frame),
            count: Some(report.iterations),
            value: Some(report.final_cost),
            ..Event::new(frame, EventKind::JobDone)
        });
        self.import_result(&graph);
        job.status = JobStatus::Imported;
        self.events.push(Event {
            loop_frame: Some(job.loop_frame),
            ..Event::new(frame, EventKind::Imported)
        });
        self.prune_loop_frames();
        if let Some(t) = self.frames.get(&frame).map(|f| f.t) {
            self.update_fixation(t);
        }
        Ok(())
    }

    pub(crate) fn finish_loop_job(&mut self) -> Result<()> {
        self.join_job()
    }

    pub fn job_running(&self) -> bool {
        self.loop_state.job.as_ref().is_some_and(|j| j.status == JobStatus::Running)
    }

    /// One loop-closure step for the newest frame.
    pub(crate) fn loop_step(&mut self, query: FrameId, keypoints: &[crate::estimator::Keypoint]) -> Result<()> {
        if let Some(job) = &self.loop_state.job {
            if self.frame_count >= job.join_at {
                self.join_job()?;
            }
            return Ok(());
        }
        let cfg = self.cfg.loop_closure;
        if self.loop_state.last_closure.is_some_and(|c| self.frame_count < c + cfg.min_interval) {
            return Ok(());
        }
        let Some(mut cand) = self.recognize(query) else { return Ok(()) };
        self.events.push(Event {
            loop_frame: Some(cand.matched),
            count: Some(cand.shared.len()),
            ..Event::new(query, EventKind::LoopDetected)
        });
        self.verify(&mut cand, keypoints);
        if !cand.verified {
            self.events.push(Event {
                loop_frame: Some(cand.matched),
                count: Some(cand.inliers),
                ..Event::new(query, EventKind::LoopRejected)
            });
            return Ok(());
        }
        let corr = self.relocalize(&cand)?;
        self.loop_state.last_closure = Some(self.frame_count);
        self.events.push(Event {
            loop_frame: Some(cand.matched),
            count: Some(cand.inliers),
            value: Some(corr.r.norm()),
            ..Event::new(query, EventKind::LoopVerified)
        });
        self.prune_loop_frames();
        let now = self.frames[&query].t;
        self.update_fixation(now);
        if corr.r.norm() >= cfg.job_threshold_m {
            self.start_job(cand.matched, query);
        }
        Ok(())
    }
}
