//! Monte Carlo simulation of targets and their continuous-time filters.
//!
//! States follow Euler–Maruyama; the estimate uses the explicit filter gain
//! `eta * W H' R^-1` on each measurement increment, and `W` is stepped with
//! RK4 on the same grid. The grid is aligned to dwell/travel boundaries, so
//! every step lies wholly inside one observation mode. Each target draws
//! from its own ChaCha stream keyed by the target id, making results
//! independent of evaluation order and thread count.

use nalgebra::{Cholesky, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::models::{Scenario, TargetModel};
use crate::riccati::OVERFLOW_GUARD;
use crate::schedule::{event_list, AgentSchedule, EventKind, ScheduleError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation settings: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("target {target}: simulation diverged at t = {time}")]
    StepBlowup { target: usize, time: f64 },
    #[error("error statistics need at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error("runs do not share the same sample grid")]
    GridMismatch,
}

impl SimError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, SimError::StepBlowup { .. })
    }
}

/// Piecewise-constant control for one target: `values[k]` applies from
/// `breakpoints[k]` until the next breakpoint; zero before the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseControl {
    pub target: usize,
    pub breakpoints: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PiecewiseControl {
    fn at(&self, t: f64) -> Option<&[f64]> {
        let k = self.breakpoints.partition_point(|&b| b <= t);
        (k > 0).then(|| self.values[k - 1].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub cycles: usize,
    /// Largest integration step.
    pub dt: f64,
    /// Record every `stride`-th step (the final time is always recorded).
    pub stride: usize,
    /// Initial state and filter covariance; identity when absent.
    pub initial_cov: Option<Mat>,
    pub controls: Vec<PiecewiseControl>,
    /// Switch off process and measurement noise.
    pub noiseless: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cycles: 20,
            dt: 1e-3,
            stride: 10,
            initial_cov: None,
            controls: Vec::new(),
            noiseless: false,
        }
    }
}

pub const MIN_CYCLES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetTrace {
    pub target: usize,
    pub times: Vec<f64>,
    pub state: Vec<DVector<f64>>,
    pub estimate: Vec<DVector<f64>>,
    pub cov: Vec<Mat>,
    pub observed: Vec<bool>,
    /// Innovation increment `dz - H xhat dt` of the step starting at each
    /// sample; zero while unobserved.
    pub innovation: Vec<DVector<f64>>,
}

impl TargetTrace {
    pub fn error(&self, k: usize) -> DVector<f64> {
        &self.state[k] - &self.estimate[k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub period: f64,
    pub cycles: usize,
    pub targets: Vec<TargetTrace>,
}

/// One integration step: start time, length, and the observed target id.
#[derive(Debug, Clone, Copy)]
struct Step {
    t: f64,
    h: f64,
    observed: Option<usize>,
}

fn step_plan(s: &Scenario, sched: &AgentSchedule, cfg: &SimConfig) -> Result<(f64, Vec<Step>), SimError> {
    let events = event_list(sched, &s.graph);
    let period: f64 = events.iter().map(|e| e.duration).sum();
    let mut plan = Vec::new();
    for c in 0..cfg.cycles {
        let base = c as f64 * period;
        for e in &events {
            if e.duration <= 0.0 {
                continue;
            }
            let n = (e.duration / cfg.dt).ceil().max(1.0) as usize;
            let h = e.duration / n as f64;
            let observed = match e.kind {
                EventKind::Dwell { target } => Some(target),
                EventKind::Travel { .. } => None,
            };
            for j in 0..n {
                plan.push(Step { t: base + e.start + h * j as f64, h, observed });
            }
        }
    }
    Ok((period, plan))
}

fn check(s: &Scenario, sched: &AgentSchedule, cfg: &SimConfig) -> Result<(), SimError> {
    sched.validate(s.len())?;
    if cfg.cycles < MIN_CYCLES {
        return Err(SimError::BadConfig(format!("need at least {MIN_CYCLES} cycles, got {}", cfg.cycles)));
    }
    if !(cfg.dt.is_finite() && cfg.dt > 0.0) {
        return Err(SimError::BadConfig(format!("step {} must be positive", cfg.dt)));
    }
    if cfg.stride == 0 {
        return Err(SimError::BadConfig("stride must be at least 1".into()));
    }
    for m in &s.targets {
        let rate = m.max_growth_rate();
        if rate > 0.0 && cfg.dt > 1e-2 / rate {
            return Err(SimError::BadConfig(format!(
                "step {} exceeds the covariance integrator step {} for target {}",
                cfg.dt,
                1e-2 / rate,
                m.id
            )));
        }
    }
    if let Some(p) = &cfg.initial_cov {
        if let Some(m) = s.targets.iter().find(|m| p.shape() != (m.state_dim(), m.state_dim())) {
            return Err(SimError::BadConfig(format!("initial covariance does not fit target {}", m.id)));
        }
        if !linalg::is_spd(p) {
            return Err(SimError::BadConfig("initial covariance must be positive definite".into()));
        }
    }
    for c in &cfg.controls {
        let Some(m) = s.targets.iter().find(|m| m.id == c.target) else {
            return Err(SimError::BadConfig(format!("control for unknown target {}", c.target)));
        };
        let Some(b) = &m.b else {
            return Err(SimError::BadConfig(format!("target {} has no input matrix B", c.target)));
        };
        if c.breakpoints.len() != c.values.len()
            || c.values.iter().any(|v| v.len() != b.ncols())
            || c.breakpoints.windows(2).any(|w| w[0] > w[1])
        {
            return Err(SimError::BadConfig(format!("malformed control for target {}", c.target)));
        }
    }
    Ok(())
}

fn lower_factor(m: &Mat) -> Mat {
    Cholesky::<f64, Dyn>::new(m.clone()).map(|c| c.l()).unwrap_or_else(|| Mat::zeros(m.nrows(), m.ncols()))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

fn riccati_rhs(w: &Mat, m: &TargetModel, g: Option<&Mat>) -> Mat {
    let mut out = &m.a * w + w * m.a.transpose() + &m.q;
    if let Some(g) = g {
        out -= w * g * w;
    }
    out
}

fn rk4(w: &Mat, m: &TargetModel, g: Option<&Mat>, h: f64) -> Mat {
    let k1 = riccati_rhs(w, m, g);
    let k2 = riccati_rhs(&(w + &k1 * (0.5 * h)), m, g);
    let k3 = riccati_rhs(&(w + &k2 * (0.5 * h)), m, g);
    let k4 = riccati_rhs(&(w + &k3 * h), m, g);
    linalg::symmetrize(&(w + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)))
}

fn simulate_target(
    m: &TargetModel,
    control: Option<&PiecewiseControl>,
    plan: &[Step],
    cfg: &SimConfig,
    seed: u64,
) -> Result<TargetTrace, SimError> {
    let l = m.state_dim();
    let p = m.obs_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m.id as u64);
    let w0 = cfg.initial_cov.clone().unwrap_or_else(|| Mat::identity(l, l));
    let lq = lower_factor(&m.q);
    let lr = lower_factor(&m.r);
    let g = m.info_matrix();
    let gain_factor = m.gain_factor();

    let mut x = if cfg.noiseless { DVector::zeros(l) } else { lower_factor(&w0) * gaussian(&mut rng, l) };
    if cfg.noiseless {
        x.fill(1.0);
    }
    let mut xhat = DVector::zeros(l);
    let mut w = w0;

    let mut out = TargetTrace {
        target: m.id,
        times: Vec::new(),
        state: Vec::new(),
        estimate: Vec::new(),
        cov: Vec::new(),
        observed: Vec::new(),
        innovation: Vec::new(),
    };
    for (k, st) in plan.iter().enumerate() {
        let observed = st.observed == Some(m.id);
        // Both draws happen every step so the stream stays aligned whatever the schedule.
        let xi = gaussian(&mut rng, l);
        let zeta = gaussian(&mut rng, p);
        let (dw, dv) = if cfg.noiseless {
            (DVector::zeros(l), DVector::zeros(p))
        } else {
            (&lq * xi * st.h.sqrt(), &lr * zeta * st.h.sqrt())
        };
        let drive = match (control.and_then(|c| c.at(st.t)), &m.b) {
            (Some(u), Some(b)) => b * DVector::from_column_slice(u) * st.h,
            _ => DVector::zeros(l),
        };
        let innov = if observed {
            &m.h * &x * st.h + dv - &m.h * &xhat * st.h
        } else {
            DVector::zeros(p)
        };
        if k % cfg.stride == 0 {
            out.times.push(st.t);
            out.state.push(x.clone());
            out.estimate.push(xhat.clone());
            out.cov.push(w.clone());
            out.observed.push(observed);
            out.innovation.push(innov.clone());
        }
        let x_next = &x + &m.a * &x * st.h + &drive + dw;
        let mut xhat_next = &xhat + &m.a * &xhat * st.h + &drive;
        if observed {
            xhat_next += &w * &gain_factor * &innov;
        }
        w = rk4(&w, m, observed.then_some(&g), st.h);
        x = x_next;
        xhat = xhat_next;
        let ok = |v: &DVector<f64>| v.iter().all(|e| e.is_finite() && e.abs() <= OVERFLOW_GUARD);
        if !ok(&x) || !ok(&xhat) || !w.iter().all(|e| e.is_finite() && e.abs() <= OVERFLOW_GUARD) {
            return Err(SimError::StepBlowup { target: m.id, time: st.t + st.h });
        }
    }
    let end = plan.last().map(|s| s.t + s.h).unwrap_or(0.0);
    out.times.push(end);
    out.state.push(x);
    out.estimate.push(xhat);
    out.cov.push(w);
    out.observed.push(false);
    out.innovation.push(DVector::zeros(p));
    Ok(out)
}

/// Simulates every target over `cfg.cycles` repetitions of the schedule.
pub fn simulate(s: &Scenario, sched: &AgentSchedule, cfg: &SimConfig) -> Result<SimTrace, SimError> {
    check(s, sched, cfg)?;
    let (period, plan) = step_plan(s, sched, cfg)?;
    let targets = s
        .targets
        .par_iter()
        .map(|m| {
            let control = cfg.controls.iter().find(|c| c.target == m.id);
            simulate_target(m, control, &plan, cfg, cfg.seed)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimTrace { period, cycles: cfg.cycles, targets })
}

/// SplitMix64 finalizer; spreads run indices over the seed space.
fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n_runs` independent simulations; run `k` is seeded from `(cfg.seed, k)`.
pub fn monte_carlo(
    s: &Scenario,
    sched: &AgentSchedule,
    cfg: &SimConfig,
    n_runs: usize,
) -> Result<Vec<SimTrace>, SimError> {
    (0..n_runs)
        .into_par_iter()
        .map(|k| simulate(s, sched, &SimConfig { seed: mix(cfg.seed, k as u64), ..cfg.clone() }))
        .collect()
}

/// Estimation-error statistics across runs at one sample index.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub target: usize,
    pub time: f64,
    pub runs: usize,
    pub mean: DVector<f64>,
    /// Sample covariance of the error (divisor `n - 1`).
    pub cov: Mat,
    /// Standard error of each entry of `cov`.
    pub std_error: Mat,
    /// Filter covariance at the same time.
    pub filter_cov: Mat,
    /// Sample variances of the whitened error `L^-1 e`, `W = L L'`.
    pub normalized_var: Vec<f64>,
}

/// Per-target error statistics at sample `k` of every trace.
pub fn empirical_error_stats(traces: &[SimTrace], k: usize) -> Result<Vec<ErrorStats>, SimError> {
    let n = traces.len();
    if n < 2 {
        return Err(SimError::TooFewRuns(n));
    }
    let first = &traces[0];
    let mut out = Vec::with_capacity(first.targets.len());
    for (ti, t0) in first.targets.iter().enumerate() {
        if k >= t0.times.len() {
            return Err(SimError::GridMismatch);
        }
        let mut errs = Vec::with_capacity(n);
        for tr in traces {
            let tt = tr.targets.get(ti).ok_or(SimError::GridMismatch)?;
            if tt.target != t0.target || tt.times.len() != t0.times.len() || tt.times[k] != t0.times[k] {
                return Err(SimError::GridMismatch);
            }
            errs.push(tt.error(k));
        }
        let l = errs[0].len();
        let nf = n as f64;
        let mean = errs.iter().fold(DVector::zeros(l), |a, e| a + e) / nf;
        let centred: Vec<DVector<f64>> = errs.iter().map(|e| e - &mean).collect();
        let cov = centred.iter().fold(Mat::zeros(l, l), |a, e| a + e * e.transpose()) / (nf - 1.0);
        let std_error = Mat::from_fn(l, l, |i, j| {
            let prods: Vec<f64> = centred.iter().map(|e| e[i] * e[j]).collect();
            let mu = prods.iter().sum::<f64>() / nf;
            let var = prods.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0);
            (var / nf).sqrt()
        });
        let filter_cov = t0.cov[k].clone();
        let normalized_var = match Cholesky::<f64, Dyn>::new(filter_cov.clone()) {
            Some(ch) => {
                let white: Vec<DVector<f64>> = centred.iter().map(|e| ch.l().solve_lower_triangular(e).unwrap_or_else(|| e.clone())).collect();
                (0..l).map(|i| white.iter().map(|w| w[i] * w[i]).sum::<f64>() / (nf - 1.0)).collect()
            }
            None => vec![f64::NAN; l],
        };
        out.push(ErrorStats {
            target: t0.target,
            time: t0.times[k],
            runs: n,
            mean,
            cov,
            std_error,
            filter_cov,
            normalized_var,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MonitoringGraph;

    fn pair() -> (Scenario, AgentSchedule) {
        let g = MonitoringGraph::euclidean(&[[0.0, 0.0], [0.5, 0.0]]).unwrap();
        let s = Scenario::new(
            vec![TargetModel::scalar(1, 0.3, 1.0, 1.0), TargetModel::scalar(2, 0.2, 0.5, 2.0)],
            g,
        );
        (s, AgentSchedule::new(vec![1, 2], vec![1.0, 1.5]))
    }

    #[test]
    fn noiseless_estimate_converges() {
        let (s, sched) = pair();
        let cfg = SimConfig { cycles: 15, noiseless: true, ..SimConfig::default() };
        let tr = simulate(&s, &sched, &cfg).unwrap();
        for t in &tr.targets {
            let last = t.times.len() - 1;
            assert_eq!(t.error(0)[0], 1.0);
            assert!(t.error(last).norm() < 1e-3, "{}", t.error(last));
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let (s, sched) = pair();
        let cfg = SimConfig { cycles: 3, seed: 9, ..SimConfig::default() };
        assert_eq!(simulate(&s, &sched, &cfg).unwrap(), simulate(&s, &sched, &cfg).unwrap());
        let other = simulate(&s, &sched, &SimConfig { seed: 10, ..cfg.clone() }).unwrap();
        assert_ne!(simulate(&s, &sched, &cfg).unwrap().targets[0].state, other.targets[0].state);
    }

    #[test]
    fn substreams_do_not_depend_on_other_targets() {
        let (s, sched) = pair();
        let cfg = SimConfig { cycles: 3, seed: 4, ..SimConfig::default() };
        let a = simulate(&s, &sched, &cfg).unwrap();
        let mut s2 = s.clone();
        s2.targets[1].q = linalg::scalar(3.0);
        let b = simulate(&s2, &sched, &cfg).unwrap();
        assert_eq!(a.targets[0], b.targets[0]);
    }

    #[test]
    fn rejects_bad_settings() {
        let (s, sched) = pair();
        for cfg in [
            SimConfig { cycles: 2, ..SimConfig::default() },
            SimConfig { dt: 0.0, ..SimConfig::default() },
            SimConfig { dt: 1.0, ..SimConfig::default() },
            SimConfig { stride: 0, ..SimConfig::default() },
        ] {
            assert!(matches!(simulate(&s, &sched, &cfg), Err(SimError::BadConfig(_))));
        }
        let bad = AgentSchedule::new(vec![1], vec![1.0]);
        assert!(matches!(simulate(&s, &bad, &SimConfig::default()), Err(SimError::Schedule(_))));
    }

    #[test]
    fn controls_do_not_change_the_error() {
        let (mut s, sched) = pair();
        s.targets[0].b = Some(linalg::scalar(1.0));
        let cfg = SimConfig { cycles: 3, seed: 2, ..SimConfig::default() };
        let plain = simulate(&s, &sched, &cfg).unwrap();
        let ctl = PiecewiseControl { target: 1, breakpoints: vec![0.5, 2.0], values: vec![vec![3.0], vec![-1.0]] };
        let driven = simulate(&s, &sched, &SimConfig { controls: vec![ctl], ..cfg }).unwrap();
        let (a, b) = (&plain.targets[0], &driven.targets[0]);
        assert_ne!(a.state, b.state);
        for k in 0..a.times.len() {
            assert!((a.error(k) - b.error(k)).norm() < 1e-9);
        }
    }

    #[test]
    fn stats_need_two_runs() {
        let (s, sched) = pair();
        let runs = monte_carlo(&s, &sched, &SimConfig { cycles: 3, ..SimConfig::default() }, 1).unwrap();
        assert_eq!(empirical_error_stats(&runs, 0), Err(SimError::TooFewRuns(1)));
    }
}
