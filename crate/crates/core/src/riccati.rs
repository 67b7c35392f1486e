//! Intermittent Riccati covariance dynamics and its periodic steady state.
//!
//! While a target is observed its covariance follows
//! `dW/dt = A W + W A' + Q - W G W`, and while unobserved the same equation
//! without the quadratic term. Two routes are provided:
//!
//! * a fixed-step RK4 integrator ([`propagate`]) used for dense trajectories
//!   and as the reference stepping scheme, and
//! * the linear-fractional form of the flow: with `W = Y X^-1`,
//!   `d/dt [X; Y] = [[-A', eta G], [Q, A]] [X; Y]`, so one segment acts on
//!   `W` through the exponential of that Hamiltonian block. Composing the
//!   segments of a cycle gives the one-period map, whose attracting fixed
//!   point is the limit cycle's value at time zero.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::models::{CovNorm, SolverSettings, TargetModel, WeightFn};
use crate::schedule::{Phase, TargetTimeline};

/// Any covariance entry above this aborts integration.
pub const OVERFLOW_GUARD: f64 = 1e12;
/// Minimum RK4 steps across one segment.
pub const MIN_STEPS_PER_SEGMENT: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiccatiError {
    #[error("covariance exceeded {OVERFLOW_GUARD:e}; step or segment too long for the unstable growth")]
    StepBlowup,
    #[error("target {0} is never observed; no periodic steady state exists")]
    NoObservation(usize),
    #[error("target {target}: one-period map did not converge after {cycles} cycles (defect {defect:e})")]
    NonConvergence { target: usize, cycles: usize, defect: f64 },
    #[error("negative duration {0}")]
    NegativeDuration(f64),
}

/// Convergence and sampling controls for the limit-cycle solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSettings {
    pub tol: f64,
    pub max_cycles: usize,
    pub samples_per_segment: usize,
}

impl Default for CycleSettings {
    fn default() -> Self {
        Self::from(&SolverSettings::default())
    }
}

impl From<&SolverSettings> for CycleSettings {
    fn from(s: &SolverSettings) -> Self {
        Self { tol: s.cycle_tol, max_cycles: s.max_cycles, samples_per_segment: s.samples_per_segment }
    }
}

/// Right-hand side of the covariance ODE.
fn rhs(w: &Mat, a: &Mat, q: &Mat, g: Option<&Mat>) -> Mat {
    let mut out = a * w + w * a.transpose() + q;
    if let Some(g) = g {
        out -= w * g * w;
    }
    out
}

fn rk4_step(w: &Mat, a: &Mat, q: &Mat, g: Option<&Mat>, h: f64) -> Mat {
    let k1 = rhs(w, a, q, g);
    let k2 = rhs(&(w + &k1 * (0.5 * h)), a, q, g);
    let k3 = rhs(&(w + &k2 * (0.5 * h)), a, q, g);
    let k4 = rhs(&(w + &k3 * h), a, q, g);
    w + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Default step bound for a segment of length `len`: a twentieth of the
/// segment and a hundredth of the model's characteristic time.
pub fn default_step(m: &TargetModel, len: f64) -> f64 {
    let seg = len / MIN_STEPS_PER_SEGMENT as f64;
    let rate = m.max_growth_rate();
    if rate > 0.0 {
        seg.min(1e-2 / rate)
    } else {
        seg
    }
}

/// Integrates the covariance ODE over `dt` with observation held fixed,
/// using the default step rule.
pub fn propagate(w0: &Mat, m: &TargetModel, observed: bool, dt: f64) -> Result<Mat, RiccatiError> {
    propagate_with_step(w0, m, observed, dt, default_step(m, dt))
}

/// As [`propagate`] with steps no longer than `max_step` (equal steps that
/// land exactly on `dt`).
pub fn propagate_with_step(
    w0: &Mat,
    m: &TargetModel,
    observed: bool,
    dt: f64,
    max_step: f64,
) -> Result<Mat, RiccatiError> {
    if dt < 0.0 {
        return Err(RiccatiError::NegativeDuration(dt));
    }
    if dt == 0.0 {
        return Ok(w0.clone());
    }
    let g = observed.then(|| m.info_matrix());
    let steps = (dt / max_step).ceil().max(1.0) as usize;
    let h = dt / steps as f64;
    let mut w = w0.clone();
    for _ in 0..steps {
        w = linalg::symmetrize(&rk4_step(&w, &m.a, &m.q, g.as_ref(), h));
        guard(&w)?;
    }
    Ok(w)
}

fn guard(w: &Mat) -> Result<(), RiccatiError> {
    if w.iter().all(|x| x.is_finite() && x.abs() <= OVERFLOW_GUARD) {
        Ok(())
    } else {
        Err(RiccatiError::StepBlowup)
    }
}

/// RK4 across a whole timeline from `w0` at time zero, steps bounded by
/// `max_step` and aligned to every segment boundary.
pub fn propagate_timeline(
    w0: &Mat,
    m: &TargetModel,
    tl: &TargetTimeline,
    max_step: f64,
) -> Result<Mat, RiccatiError> {
    let mut w = w0.clone();
    for p in tl.phases() {
        w = propagate_with_step(&w, m, p.observed, p.duration, max_step)?;
    }
    Ok(w)
}

/// Hamiltonian transition of one segment, acting on `[X; Y]`.
pub fn segment_transition(m: &TargetModel, observed: bool, dur: f64) -> Result<Mat, RiccatiError> {
    let l = m.state_dim();
    let mut ham = DMatrix::zeros(2 * l, 2 * l);
    ham.view_mut((0, 0), (l, l)).copy_from(&(-m.a.transpose()));
    if observed {
        ham.view_mut((0, l), (l, l)).copy_from(&m.info_matrix());
    }
    ham.view_mut((l, 0), (l, l)).copy_from(&m.q);
    ham.view_mut((l, l), (l, l)).copy_from(&m.a);
    let phi = (ham * dur).exp();
    if phi.iter().all(|x| x.is_finite()) {
        Ok(phi)
    } else {
        Err(RiccatiError::StepBlowup)
    }
}

/// Applies a Hamiltonian transition to a covariance: `(Φ21 + Φ22 W)(Φ11 + Φ12 W)^-1`.
pub fn apply_transition(phi: &Mat, w: &Mat) -> Result<Mat, RiccatiError> {
    let l = w.nrows();
    let x = phi.view((0, 0), (l, l)) + phi.view((0, l), (l, l)) * w;
    let y = phi.view((l, 0), (l, l)) + phi.view((l, l), (l, l)) * w;
    // W' = Y X^-1  <=>  X' W'' = Y'
    let sol = x
        .transpose()
        .lu()
        .solve(&y.transpose())
        .ok_or(RiccatiError::StepBlowup)?;
    let out = linalg::symmetrize(&sol.transpose());
    guard(&out)?;
    Ok(out)
}

fn normalized(m: Mat) -> Mat {
    let s = m.amax();
    if s > 0.0 && s.is_finite() {
        m / s
    } else {
        m
    }
}

/// Composite transition of a list of phases (later phases on the left).
pub fn phases_transition(m: &TargetModel, phases: &[Phase]) -> Result<Mat, RiccatiError> {
    let l = m.state_dim();
    let mut phi = Mat::identity(2 * l, 2 * l);
    for p in phases.iter().filter(|p| p.duration > 0.0) {
        phi = normalized(segment_transition(m, p.observed, p.duration)? * phi);
    }
    Ok(phi)
}

/// Fixed point of the one-period map with transition `phi`.
///
/// Iterates `W <- F^(2^k)(W)`, squaring the transition each round, until the
/// single-period defect `||F(W) - W||_F` drops below `tol (1 + ||W||_F)`;
/// then a few plain iterations settle the last digits.
pub fn periodic_fixed_point(
    target: usize,
    phi: &Mat,
    init: &Mat,
    settings: &CycleSettings,
) -> Result<(Mat, usize, f64), RiccatiError> {
    let mut w = init.clone();
    let mut power = phi.clone();
    let mut cycles = 0usize;
    let mut stride = 1usize;
    let mut doubling = true;
    let threshold = |w: &Mat| settings.tol * (1.0 + w.norm());
    loop {
        let next = apply_transition(phi, &w)?;
        let defect = (&next - &w).norm();
        if defect <= threshold(&w) {
            break;
        }
        if cycles + stride > settings.max_cycles {
            return Err(RiccatiError::NonConvergence { target, cycles, defect });
        }
        // Squared transitions lose the subdominant directions in floating
        // point; a doubled step that fails or leaves the cone falls back to
        // plain one-period iteration, which converges from any SPD start.
        match apply_transition(&power, &w) {
            Ok(cand) if stride == 1 || linalg::is_spd(&cand) => {
                w = cand;
                cycles += stride;
            }
            _ => {
                doubling = false;
                power = phi.clone();
                stride = 1;
                continue;
            }
        }
        if doubling && stride <= settings.max_cycles / 2 {
            power = normalized(&power * &power);
            stride *= 2;
        }
    }
    let mut defect = f64::INFINITY;
    for _ in 0..4 {
        let next = apply_transition(phi, &w)?;
        let d = (&next - &w).norm();
        w = next;
        cycles += 1;
        if d >= defect {
            defect = d;
            break;
        }
        defect = d;
    }
    Ok((w, cycles, defect))
}

/// Default seed for the fixed-point iteration.
pub fn default_seed(m: &TargetModel) -> Mat {
    Mat::identity(m.state_dim(), m.state_dim())
}

/// Peak covariance (at the visit start) of a target visited once per cycle.
pub fn single_visit_peak(
    m: &TargetModel,
    t_on: f64,
    t_off: f64,
    settings: &CycleSettings,
    warm: Option<&Mat>,
) -> Result<Mat, RiccatiError> {
    if t_on <= 0.0 {
        return Err(RiccatiError::NoObservation(m.id));
    }
    let mut phi = segment_transition(m, true, t_on)?;
    if t_off > 0.0 {
        phi = normalized(segment_transition(m, false, t_off)? * phi);
    }
    let seed = warm.cloned().unwrap_or_else(|| default_seed(m));
    periodic_fixed_point(m.id, &phi, &seed, settings).map(|(w, _, _)| w)
}

/// Limit-cycle covariance of one target over `[0, period]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovTrajectory {
    pub target: usize,
    pub period: f64,
    /// Dense sample times in `[0, period]`, nondecreasing.
    pub times: Vec<f64>,
    pub covs: Vec<Mat>,
    /// Phase index of each sample; the closing sample at `period` gets the
    /// index of the last phase.
    pub sample_phase: Vec<usize>,
    pub phases: Vec<Phase>,
    /// Value at the start of every phase, plus the value at `period`.
    pub boundary: Vec<Mat>,
    pub cycles: usize,
    /// Single-period defect of the accepted fixed point.
    pub defect: f64,
}

impl CovTrajectory {
    pub fn start(&self) -> &Mat {
        &self.boundary[0]
    }

    /// `||W(T) - W(0)||` along the exact boundary propagation.
    pub fn periodicity_gap(&self) -> f64 {
        (&self.boundary[self.boundary.len() - 1] - &self.boundary[0]).norm()
    }

    /// Covariance at cycle phase `t` (taken modulo the period), propagated
    /// exactly from the preceding phase boundary.
    pub fn value_at(&self, m: &TargetModel, t: f64) -> Result<Mat, RiccatiError> {
        let t = if self.period > 0.0 { t.rem_euclid(self.period) } else { 0.0 };
        let pi = self
            .phases
            .iter()
            .rposition(|p| p.duration > 0.0 && p.start <= t)
            .unwrap_or(0);
        let p = &self.phases[pi];
        let dt = (t - p.start).clamp(0.0, p.duration);
        if dt == 0.0 {
            return Ok(self.boundary[pi].clone());
        }
        apply_transition(&segment_transition(m, p.observed, dt)?, &self.boundary[pi])
    }
}

/// Periodic steady state of the covariance on a target's timeline.
pub fn steady_state_cycle(
    m: &TargetModel,
    tl: &TargetTimeline,
    settings: &CycleSettings,
) -> Result<CovTrajectory, RiccatiError> {
    steady_state_cycle_from(m, tl, settings, &default_seed(m))
}

pub fn steady_state_cycle_from(
    m: &TargetModel,
    tl: &TargetTimeline,
    settings: &CycleSettings,
    seed: &Mat,
) -> Result<CovTrajectory, RiccatiError> {
    if tl.t_on.iter().all(|&t| t <= 0.0) {
        return Err(RiccatiError::NoObservation(tl.target));
    }
    let phases = tl.phases();
    let phi = phases_transition(m, &phases)?;
    let (w0, cycles, defect) = periodic_fixed_point(tl.target, &phi, seed, settings)?;

    let mut boundary = Vec::with_capacity(phases.len() + 1);
    boundary.push(w0);
    for p in &phases {
        let last = boundary.last().expect("nonempty");
        let next = if p.duration > 0.0 {
            apply_transition(&segment_transition(m, p.observed, p.duration)?, last)?
        } else {
            last.clone()
        };
        boundary.push(next);
    }

    let samples = settings.samples_per_segment.max(1);
    let mut times = Vec::new();
    let mut covs = Vec::new();
    let mut sample_phase = Vec::new();
    for (pi, p) in phases.iter().enumerate() {
        if p.duration <= 0.0 {
            continue;
        }
        let sub = (default_step(m, p.duration) * samples as f64 / p.duration)
            .recip()
            .ceil()
            .max(1.0) as usize;
        let h = p.duration / samples as f64;
        let mut w = boundary[pi].clone();
        for j in 0..samples {
            times.push(p.start + h * j as f64);
            covs.push(w.clone());
            sample_phase.push(pi);
            w = propagate_with_step(&w, m, p.observed, h, h / sub as f64)?;
        }
    }
    times.push(tl.period);
    covs.push(boundary[phases.len()].clone());
    sample_phase.push(phases.len() - 1);

    Ok(CovTrajectory {
        target: tl.target,
        period: tl.period,
        times,
        covs,
        sample_phase,
        phases,
        boundary,
        cycles,
        defect,
    })
}

/// Upper peaks (visit starts) and lower peaks (visit ends) of one target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakSet {
    pub target: usize,
    #[serde(serialize_with = "ser_mats")]
    pub upper: Vec<Mat>,
    #[serde(serialize_with = "ser_mats")]
    pub lower: Vec<Mat>,
    /// `g(||upper[k]||)`.
    pub weighted: Vec<f64>,
}

fn ser_mats<S: serde::Serializer>(v: &[Mat], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for m in v {
        seq.serialize_element(&linalg::to_rows(m))?;
    }
    seq.end()
}

impl PeakSet {
    pub fn max_weighted(&self) -> f64 {
        self.weighted.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn extract_peaks(traj: &CovTrajectory, weight: &WeightFn, norm: CovNorm) -> PeakSet {
    let visits = (traj.phases.len() - 1) / 2;
    let mut upper = Vec::with_capacity(visits);
    let mut lower = Vec::with_capacity(visits);
    for k in 0..visits {
        let on = TargetTimeline::on_phase_index(k);
        upper.push(traj.boundary[on].clone());
        lower.push(traj.boundary[on + 1].clone());
    }
    let weighted = upper.iter().map(|p| weight.eval(norm.eval(p))).collect();
    PeakSet { target: traj.target, upper, lower, weighted }
}

/// Minimax cost: the largest weighted upper peak over all targets.
pub fn cost(peaks: &[PeakSet]) -> f64 {
    peaks.iter().map(PeakSet::max_weighted).fold(f64::NEG_INFINITY, f64::max)
}

/// Which timing parameter of a target's timeline to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingParam {
    On(usize),
    Off(usize),
}

fn perturbed(tl: &TargetTimeline, which: TimingParam, delta: f64) -> TargetTimeline {
    let mut t_on = tl.t_on.clone();
    let mut t_off = tl.t_off.clone();
    match which {
        TimingParam::On(k) => t_on[k] += delta,
        TimingParam::Off(k) => t_off[k] += delta,
    }
    let n = t_on.len();
    let mut visit_start = Vec::with_capacity(n);
    let mut visit_end = Vec::with_capacity(n);
    let mut clock = tl.visit_start[0];
    for k in 0..n {
        visit_start.push(clock);
        visit_end.push(clock + t_on[k]);
        clock += t_on[k] + t_off[k];
    }
    let period = t_on.iter().sum::<f64>() + t_off.iter().sum::<f64>();
    TargetTimeline { target: tl.target, t_on, t_off, visit_start, visit_end, period }
}

/// Upper peaks of the limit cycle on a timeline.
pub fn upper_peaks(
    m: &TargetModel,
    tl: &TargetTimeline,
    settings: &CycleSettings,
) -> Result<Vec<Mat>, RiccatiError> {
    let phases = tl.phases();
    let phi = phases_transition(m, &phases)?;
    let (mut w, _, _) = periodic_fixed_point(tl.target, &phi, &default_seed(m), settings)?;
    let mut out = Vec::with_capacity(tl.visits());
    for p in &phases {
        if p.observed {
            out.push(w.clone());
        }
        if p.duration > 0.0 {
            w = apply_transition(&segment_transition(m, p.observed, p.duration)?, &w)?;
        }
    }
    Ok(out)
}

/// Central finite-difference estimate of `d Pbar^visit / d which`, holding
/// the target's other on/off durations fixed (the period moves with the
/// perturbed duration).
pub fn peak_sensitivity_fd(
    m: &TargetModel,
    tl: &TargetTimeline,
    visit: usize,
    which: TimingParam,
    h: f64,
    settings: &CycleSettings,
) -> Result<Mat, RiccatiError> {
    let plus = upper_peaks(m, &perturbed(tl, which, h), settings)?;
    let minus = upper_peaks(m, &perturbed(tl, which, -h), settings)?;
    Ok(linalg::symmetrize(&((&plus[visit] - &minus[visit]) / (2.0 * h))))
}
