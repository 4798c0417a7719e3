//! Levenberg-Marquardt over the factor graph.
//!
//! Variables are pose blocks (6), speed/bias blocks (9) and Euclidean
//! landmarks (3). Landmarks are eliminated with a Schur complement every
//! iteration and back-substituted after the reduced solve. Reprojection terms
//! carry a Cauchy loss applied to the weighted squared error; IMU and two-pose
//! terms are plain quadratics.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dim, Matrix, Matrix3, Matrix6x3, SMatrix, Storage, Vector3};
use faer::linalg::solvers::Solve as _;
use nalgebra_sparse::{factorization::CscCholesky, CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::camera::{reprojection_error, CameraRig, ReprojectionFactor};
use crate::error::{Error, Result};
use crate::imu::{imu_residual, ImuFactor, ImuParams, NavState, Vector15};
use crate::marginal::{eval_two_pose_error, pinv3, TwoPoseFactor};
use crate::{FrameId, LandmarkId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVar {
    pub t: f64,
    pub state: NavState,
    pub pose_fixed: bool,
    pub speed_bias_fixed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkVar {
    pub position: Vector3<f64>,
    pub fixed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObsKey {
    pub frame: FrameId,
    pub landmark: LandmarkId,
    pub cam: usize,
}

impl ObsKey {
    pub fn of(o: &ReprojectionFactor) -> Self {
        Self {
            frame: o.frame,
            landmark: o.landmark,
            cam: o.cam,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    pub rig: CameraRig,
    pub imu_params: ImuParams,
    pub states: BTreeMap<FrameId, StateVar>,
    pub landmarks: BTreeMap<LandmarkId, LandmarkVar>,
    pub observations: BTreeMap<ObsKey, ReprojectionFactor>,
    /// Keyed by the earlier frame.
    pub imu_factors: BTreeMap<FrameId, ImuFactor>,
    /// Keyed by `(ref_frame, other_frame)`.
    pub edges: BTreeMap<(FrameId, FrameId), TwoPoseFactor>,
}

fn obs_range(f: FrameId) -> std::ops::RangeInclusive<ObsKey> {
    ObsKey {
        frame: f,
        landmark: LandmarkId(0),
        cam: 0,
    }..=ObsKey {
        frame: f,
        landmark: LandmarkId(u64::MAX),
        cam: usize::MAX,
    }
}

impl FactorGraph {
    pub fn new(rig: CameraRig, imu_params: ImuParams) -> Self {
        Self {
            rig,
            imu_params,
            ..Default::default()
        }
    }

    pub fn add_observation(&mut self, o: ReprojectionFactor) {
        self.observations.insert(ObsKey::of(&o), o);
    }

    pub fn frame_observations(&self, f: FrameId) -> impl Iterator<Item = &ReprojectionFactor> {
        self.observations.range(obs_range(f)).map(|(_, o)| o)
    }

    pub fn remove_frame_observations(&mut self, f: FrameId) -> Vec<ReprojectionFactor> {
        let keys: Vec<_> = self.observations.range(obs_range(f)).map(|(k, _)| *k).collect();
        keys.iter().filter_map(|k| self.observations.remove(k)).collect()
    }

    /// Number of observations per landmark.
    pub fn landmark_observation_counts(&self) -> BTreeMap<LandmarkId, usize> {
        let mut m = BTreeMap::new();
        for k in self.observations.keys() {
            *m.entry(k.landmark).or_insert(0) += 1;
        }
        m
    }

    /// Removes landmarks that no observation references.
    pub fn prune_landmarks(&mut self) -> usize {
        let counts = self.landmark_observation_counts();
        let before = self.landmarks.len();
        self.landmarks.retain(|id, _| counts.contains_key(id));
        before - self.landmarks.len()
    }

    pub fn validate(&self) -> Result<()> {
        for o in self.observations.values() {
            if !self.states.contains_key(&o.frame) || !self.landmarks.contains_key(&o.landmark) {
                return Err(Error::InvalidInput(format!(
                    "observation of landmark {} in frame {} references a missing variable",
                    o.landmark, o.frame
                )));
            }
            if o.cam >= self.rig.len() {
                return Err(Error::InvalidInput(format!("camera index {} out of range", o.cam)));
            }
        }
        for f in self.imu_factors.values() {
            if !self.states.contains_key(&f.from) || !self.states.contains_key(&f.to) {
                return Err(Error::InvalidInput(format!("IMU factor {}→{} references a missing state", f.from, f.to)));
            }
        }
        for e in self.edges.values() {
            if !self.states.contains_key(&e.ref_frame) || !self.states.contains_key(&e.other_frame) {
                return Err(Error::InvalidInput(format!(
                    "edge {}–{} references a missing state",
                    e.ref_frame, e.other_frame
                )));
            }
        }
        Ok(())
    }

    pub fn free_variable_count(&self) -> usize {
        self.states.values().filter(|s| !s.pose_fixed).count()
            + self.states.values().filter(|s| !s.speed_bias_fixed).count()
            + self.landmarks.values().filter(|l| !l.fixed).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub function_tolerance: f64,
    pub step_tolerance: f64,
    pub gradient_tolerance: f64,
    /// Cauchy scale on the weighted squared reprojection error; `None` disables the loss.
    pub cauchy_scale: Option<f64>,
    /// Reduced systems above this dimension use the sparse factorization.
    pub dense_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            initial_damping: 1e-4,
            function_tolerance: 1e-9,
            step_tolerance: 1e-12,
            gradient_tolerance: 1e-12,
            cauchy_scale: Some(3.0),
            dense_limit: 600,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub diverged: bool,
}

/// Cauchy loss `ρ(s) = b² ln(1 + s/b²)` and its derivative.
pub fn cauchy(s: f64, b: Option<f64>) -> (f64, f64) {
    match b {
        Some(b) => {
            let b2 = b * b;
            (b2 * (s / b2).ln_1p(), 1.0 / (1.0 + s / b2))
        }
        None => (s, 1.0),
    }
}

fn reprojection_cost(g: &FactorGraph, o: &ReprojectionFactor, loss: Option<f64>) -> f64 {
    let (Some(x), Some(l)) = (g.states.get(&o.frame), g.landmarks.get(&o.landmark)) else {
        return 0.0;
    };
    match reprojection_error(&g.rig, o.cam, &x.state.pose(), &l.position, &o.measurement) {
        Some(ev) => 0.5 * cauchy((ev.error.transpose() * o.weight * ev.error)[0], loss).0,
        None => 0.0,
    }
}

fn imu_cost(g: &FactorGraph, f: &ImuFactor) -> f64 {
    let r = imu_residual(&g.states[&f.from].state, &g.states[&f.to].state, &f.preint, &g.imu_params);
    0.5 * r.residual.norm_squared()
}

fn edge_cost(g: &FactorGraph, e: &TwoPoseFactor) -> f64 {
    e.cost(&g.states[&e.ref_frame].state.pose(), &g.states[&e.other_frame].state.pose())
}

pub fn total_cost(g: &FactorGraph, opts: &SolverOptions) -> f64 {
    let mut c = 0.0;
    for o in g.observations.values() {
        c += reprojection_cost(g, o, opts.cauchy_scale);
    }
    for f in g.imu_factors.values() {
        c += imu_cost(g, f);
    }
    for e in g.edges.values() {
        c += edge_cost(g, e);
    }
    c
}

/// Offsets of the free pose and speed/bias blocks in the reduced system.
struct Layout {
    pose: BTreeMap<FrameId, usize>,
    sb: BTreeMap<FrameId, usize>,
    n: usize,
}

impl Layout {
    fn new(g: &FactorGraph) -> Self {
        let mut pose = BTreeMap::new();
        let mut sb = BTreeMap::new();
        let mut n = 0;
        for (id, s) in &g.states {
            if !s.pose_fixed {
                pose.insert(*id, n);
                n += 6;
            }
            if !s.speed_bias_fixed {
                sb.insert(*id, n);
                n += 9;
            }
        }
        Self { pose, sb, n }
    }
}

enum Accum {
    Dense(DMatrix<f64>),
    Sparse(Vec<(usize, usize, f64)>),
}

impl Accum {
    fn add<R: Dim, C: Dim, S: Storage<f64, R, C>>(&mut self, r0: usize, c0: usize, m: &Matrix<f64, R, C, S>) {
        match self {
            Accum::Dense(h) => {
                for j in 0..m.ncols() {
                    for i in 0..m.nrows() {
                        h[(r0 + i, c0 + j)] += m[(i, j)];
                    }
                }
            }
            Accum::Sparse(t) => {
                for j in 0..m.ncols() {
                    for i in 0..m.nrows() {
                        t.push((r0 + i, c0 + j, m[(i, j)]));
                    }
                }
            }
        }
    }
}

struct LmBlock {
    id: LandmarkId,
    h_jj: Matrix3<f64>,
    b_j: Vector3<f64>,
    couplings: Vec<(usize, Matrix6x3<f64>)>,
}

/// Gauss-Newton system at the current estimate, landmarks not yet eliminated.
struct Linearization {
    h: DMatrix<f64>,
    sparse: Vec<(usize, usize, f64)>,
    diag: DVector<f64>,
    b: DVector<f64>,
    lms: Vec<LmBlock>,
    dense: bool,
}

fn linearize(g: &FactorGraph, layout: &Layout, opts: &SolverOptions) -> Linearization {
    let n = layout.n;
    let dense = n <= opts.dense_limit;
    let mut acc = if dense {
        Accum::Dense(DMatrix::zeros(n, n))
    } else {
        Accum::Sparse(Vec::new())
    };
    let mut b = DVector::zeros(n);
    let mut lm_index: BTreeMap<LandmarkId, usize> = BTreeMap::new();
    let mut lms: Vec<LmBlock> = Vec::new();
    for (id, l) in &g.landmarks {
        if !l.fixed {
            lm_index.insert(*id, lms.len());
            lms.push(LmBlock {
                id: *id,
                h_jj: Matrix3::zeros(),
                b_j: Vector3::zeros(),
                couplings: Vec::new(),
            });
        }
    }

    for o in g.observations.values() {
        let (Some(x), Some(l)) = (g.states.get(&o.frame), g.landmarks.get(&o.landmark)) else {
            continue;
        };
        let Some(ev) = reprojection_error(&g.rig, o.cam, &x.state.pose(), &l.position, &o.measurement) else {
            continue;
        };
        let s = (ev.error.transpose() * o.weight * ev.error)[0];
        let w = o.weight * cauchy(s, opts.cauchy_scale).1;
        let pose_off = layout.pose.get(&o.frame).copied();
        let lm = lm_index.get(&o.landmark).copied();
        if let Some(p) = pose_off {
            let jw = ev.j_pose.transpose() * w;
            acc.add(p, p, &(jw * ev.j_pose));
            let mut bp = b.rows_mut(p, 6);
            bp -= jw * ev.error;
            if let Some(li) = lm {
                let hpj = jw * ev.j_landmark;
                let blk = &mut lms[li];
                match blk.couplings.iter_mut().find(|(off, _)| *off == p) {
                    Some((_, m)) => *m += hpj,
                    None => blk.couplings.push((p, hpj)),
                }
            }
        }
        if let Some(li) = lm {
            let jw = ev.j_landmark.transpose() * w;
            let blk = &mut lms[li];
            blk.h_jj += jw * ev.j_landmark;
            blk.b_j -= jw * ev.error;
        }
    }

    for f in g.imu_factors.values() {
        let active = |id: &FrameId| layout.pose.contains_key(id) || layout.sb.contains_key(id);
        if !active(&f.from) && !active(&f.to) {
            continue;
        }
        let res = imu_residual(&g.states[&f.from].state, &g.states[&f.to].state, &f.preint, &g.imu_params);
        let mut j = SMatrix::<f64, 15, 30>::zeros();
        j.fixed_view_mut::<15, 15>(0, 0).copy_from(&res.j_k);
        j.fixed_view_mut::<15, 15>(0, 15).copy_from(&res.j_n);
        let h_loc = j.transpose() * j;
        let b_loc = -(j.transpose() * res.residual);
        let segs = [
            (layout.pose.get(&f.from), 0, 6),
            (layout.sb.get(&f.from), 6, 9),
            (layout.pose.get(&f.to), 15, 6),
            (layout.sb.get(&f.to), 21, 9),
        ];
        for (oa, la, na) in segs {
            let Some(&oa) = oa else { continue };
            let mut br = b.rows_mut(oa, na);
            br += b_loc.rows(la, na);
            for (ob, lb, nb) in segs {
                let Some(&ob) = ob else { continue };
                acc.add(oa, ob, &h_loc.view((la, lb), (na, nb)));
            }
        }
    }

    for e in g.edges.values() {
        if !layout.pose.contains_key(&e.ref_frame) && !layout.pose.contains_key(&e.other_frame) {
            continue;
        }
        let ev = eval_two_pose_error(e, &g.states[&e.ref_frame].state.pose(), &g.states[&e.other_frame].state.pose());
        let mut blocks: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(2);
        for (frame, jac) in [(e.ref_frame, &ev.j_r), (e.other_frame, &ev.j_c)] {
            if let Some(&p) = layout.pose.get(&frame) {
                blocks.push((p, DMatrix::from_column_slice(6, 6, jac.as_slice())));
            }
        }
        let w = DMatrix::from_column_slice(6, 6, e.w.as_slice());
        let err = DVector::from_column_slice(ev.error.as_slice());
        add_blocks(&mut acc, &mut b, &blocks, &err, Some(&w));
    }

    let (h, sparse) = match acc {
        Accum::Dense(h) => (h, Vec::new()),
        Accum::Sparse(t) => (DMatrix::zeros(0, 0), t),
    };
    let diag = if dense {
        h.diagonal()
    } else {
        let mut d = DVector::zeros(n);
        for (i, j, v) in &sparse {
            if i == j {
                d[*i] += v;
            }
        }
        d
    };
    Linearization {
        h,
        sparse,
        diag,
        b,
        lms,
        dense,
    }
}

fn add_blocks(
    acc: &mut Accum,
    b: &mut DVector<f64>,
    blocks: &[(usize, DMatrix<f64>)],
    res: &DVector<f64>,
    weight: Option<&DMatrix<f64>>,
) {
    for (oa, ja) in blocks {
        let jaw = match weight {
            Some(w) => ja.transpose() * w,
            None => ja.transpose(),
        };
        let mut br = b.rows_mut(*oa, ja.ncols());
        br -= &jaw * res;
        for (ob, jb) in blocks {
            acc.add(*oa, *ob, &(&jaw * jb));
        }
    }
}

fn floor_diag(d: f64) -> f64 {
    d.clamp(1e-6, 1e32)
}

fn invert_landmark(h: &Matrix3<f64>) -> Matrix3<f64> {
    match Cholesky::new(*h) {
        Some(c) => c.inverse(),
        None => pinv3(h, crate::marginal::PINV_TOL),
    }
}

/// Solves the damped system; returns the reduced step and the landmark steps.
fn solve(lin: &Linearization, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let n = lin.b.len();
    let mut rhs = lin.b.clone();
    let mut inverses = Vec::with_capacity(lin.lms.len());
    let mut acc = if lin.dense {
        let mut h = lin.h.clone();
        for i in 0..n {
            h[(i, i)] += lambda * floor_diag(lin.diag[i]);
        }
        Accum::Dense(h)
    } else {
        let mut t = lin.sparse.clone();
        for i in 0..n {
            t.push((i, i, lambda * floor_diag(lin.diag[i])));
        }
        Accum::Sparse(t)
    };
    for blk in &lin.lms {
        let mut hjj = blk.h_jj;
        for i in 0..3 {
            hjj[(i, i)] += lambda * floor_diag(blk.h_jj[(i, i)]);
        }
        let inv = invert_landmark(&hjj);
        for (oa, ha) in &blk.couplings {
            let k = ha * inv;
            let mut br = rhs.rows_mut(*oa, 6);
            br -= k * blk.b_j;
            for (ob, hb) in &blk.couplings {
                acc.add(*oa, *ob, &(-(k * hb.transpose())));
            }
        }
        inverses.push(inv);
    }
    let dx = if n == 0 {
        DVector::zeros(0)
    } else {
        match acc {
            Accum::Dense(h) => {
                let llt = faer::MatRef::from_column_major_slice(h.as_slice(), n, n).llt(faer::Side::Lower).ok()?;
                let mut x = rhs.clone();
                llt.solve_in_place(faer::MatMut::from_column_major_slice_mut(x.as_mut_slice(), n, 1));
                x
            }
            Accum::Sparse(t) => {
                let mut coo = CooMatrix::new(n, n);
                for (i, j, v) in t {
                    coo.push(i, j, v);
                }
                let csc = CscMatrix::from(&coo);
                let chol = CscCholesky::factor(&csc).ok()?;
                let x = chol.solve(&rhs);
                x.column(0).into_owned()
            }
        }
    };
    if dx.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut dl = Vec::with_capacity(lin.lms.len());
    for (blk, inv) in lin.lms.iter().zip(&inverses) {
        let mut r = blk.b_j;
        for (oa, ha) in &blk.couplings {
            r -= ha.transpose() * dx.rows(*oa, 6);
        }
        dl.push(inv * r);
    }
    Some((dx, dl))
}

fn apply_step(g: &mut FactorGraph, layout: &Layout, lin: &Linearization, dx: &DVector<f64>, dl: &[Vector3<f64>]) {
    for (id, s) in g.states.iter_mut() {
        let mut d = Vector15::zeros();
        let mut any = false;
        if let Some(&p) = layout.pose.get(id) {
            d.fixed_rows_mut::<6>(0).copy_from(&dx.rows(p, 6));
            any = true;
        }
        if let Some(&o) = layout.sb.get(id) {
            d.fixed_rows_mut::<9>(6).copy_from(&dx.rows(o, 9));
            any = true;
        }
        if any {
            s.state = s.state.box_plus(&d);
        }
    }
    for (blk, d) in lin.lms.iter().zip(dl) {
        if let Some(l) = g.landmarks.get_mut(&blk.id) {
            l.position += d;
        }
    }
}

/// Cost of the factors touching at least one free variable.
fn active_cost(g: &FactorGraph, layout: &Layout, opts: &SolverOptions) -> f64 {
    let free = |f: &FrameId| layout.pose.contains_key(f) || layout.sb.contains_key(f);
    let mut c = 0.0;
    for o in g.observations.values() {
        if free(&o.frame) || g.landmarks.get(&o.landmark).is_some_and(|l| !l.fixed) {
            c += reprojection_cost(g, o, opts.cauchy_scale);
        }
    }
    for f in g.imu_factors.values() {
        if free(&f.from) || free(&f.to) {
            c += imu_cost(g, f);
        }
    }
    for e in g.edges.values() {
        if layout.pose.contains_key(&e.ref_frame) || layout.pose.contains_key(&e.other_frame) {
            c += edge_cost(g, e);
        }
    }
    c
}

/// Runs LM in place. Fixed variables are never touched; factors between
/// fixed variables only are ignored, so reported costs cover the active part.
pub fn optimize(g: &mut FactorGraph, opts: &SolverOptions) -> OptReport {
    let layout = Layout::new(g);
    let initial = active_cost(g, &layout, opts);
    let mut report = OptReport {
        iterations: 0,
        initial_cost: initial,
        final_cost: initial,
        converged: false,
        diverged: false,
    };
    let free_lms = g.landmarks.values().any(|l| !l.fixed);
    if layout.n == 0 && !free_lms {
        report.converged = true;
        return report;
    }
    let mut cost = initial;
    let mut lambda = opts.initial_damping;
    let mut lin = linearize(g, &layout, opts);
    while report.iterations < opts.max_iterations {
        let grad = lin.b.amax().max(lin.lms.iter().map(|l| l.b_j.amax()).fold(0.0, f64::max));
        if grad <= opts.gradient_tolerance || cost == 0.0 {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let Some((dx, dl)) = solve(&lin, lambda) else {
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            if lambda > 1e16 {
                report.diverged = true;
                break;
            }
            continue;
        };
        let saved_states: Vec<(FrameId, NavState)> = g
            .states
            .iter()
            .filter(|(id, _)| layout.pose.contains_key(id) || layout.sb.contains_key(id))
            .map(|(id, s)| (*id, s.state))
            .collect();
        let saved_lms: Vec<Vector3<f64>> = lin.lms.iter().map(|b| g.landmarks[&b.id].position).collect();
        apply_step(g, &layout, &lin, &dx, &dl);
        let new_cost = active_cost(g, &layout, opts);
        if new_cost.is_finite() && new_cost <= cost {
            let decrease = cost - new_cost;
            let step = dx.amax().max(dl.iter().map(|d| d.amax()).fold(0.0, f64::max));
            cost = new_cost;
            lambda *= 0.5;
            if decrease <= opts.function_tolerance * cost.max(f64::MIN_POSITIVE) || step <= opts.step_tolerance {
                report.converged = true;
                break;
            }
            lin = linearize(g, &layout, opts);
        } else {
            for (id, x) in saved_states {
                if let Some(s) = g.states.get_mut(&id) {
                    s.state = x;
                }
            }
            for (blk, p) in lin.lms.iter().zip(saved_lms) {
                if let Some(l) = g.landmarks.get_mut(&blk.id) {
                    l.position = p;
                }
            }
            lambda = if lambda == 0.0 { 1e-4 } else { lambda * 10.0 };
            if lambda > 1e16 {
                report.diverged = true;
                break;
            }
        }
    }
    report.final_cost = cost;
    report
}

/// Like [`optimize`] but reports a diverged solve as an error.
pub fn optimize_checked(g: &mut FactorGraph, opts: &SolverOptions) -> Result<OptReport> {
    let r = optimize(g, opts);
    if r.diverged {
        Err(Error::Diverged)
    } else {
        Ok(r)
    }
}

/// Gradient of the total cost over the free variables, in layout order
/// followed by the free landmarks.
pub fn gradient(g: &FactorGraph, opts: &SolverOptions) -> DVector<f64> {
    let layout = Layout::new(g);
    let lin = linearize(g, &layout, opts);
    let mut out = DVector::zeros(layout.n + 3 * lin.lms.len());
    out.rows_mut(0, layout.n).copy_from(&(-&lin.b));
    for (i, blk) in lin.lms.iter().enumerate() {
        out.fixed_rows_mut::<3>(layout.n + 3 * i).copy_from(&(-blk.b_j));
    }
    out
}

fn perturbed(g: &FactorGraph, layout: &Layout, idx: usize, h: f64) -> FactorGraph {
    let mut c = g.clone();
    for (id, s) in c.states.iter_mut() {
        let mut d = Vector15::zeros();
        if let Some(&p) = layout.pose.get(id) {
            if (p..p + 6).contains(&idx) {
                d[idx - p] = h;
            }
        }
        if let Some(&o) = layout.sb.get(id) {
            if (o..o + 9).contains(&idx) {
                d[6 + idx - o] = h;
            }
        }
        if d.amax() != 0.0 {
            s.state = s.state.box_plus(&d);
        }
    }
    if idx >= layout.n {
        let k = idx - layout.n;
        if let Some((_, l)) = c.landmarks.iter_mut().filter(|(_, l)| !l.fixed).nth(k / 3) {
            l.position[k % 3] += h;
        }
    }
    c
}

/// Largest deviation between the assembled gradient and a central-difference
/// gradient of [`total_cost`], relative to the largest gradient entry.
pub fn marginal_step_check(g: &FactorGraph, opts: &SolverOptions) -> f64 {
    let layout = Layout::new(g);
    let analytic = gradient(g, opts);
    if analytic.is_empty() {
        return 0.0;
    }
    let h = 1e-6;
    let numeric = DVector::from_iterator(
        analytic.len(),
        (0..analytic.len()).map(|i| {
            (total_cost(&perturbed(g, &layout, i, h), opts) - total_cost(&perturbed(g, &layout, i, -h), opts)) / (2.0 * h)
        }),
    );
    (&analytic - &numeric).amax() / numeric.amax().max(1e-8)
}
