//! Dwell-time balancing for single-visit cycles.
//!
//! Each round moves every dwell time by `kp * ln(g_i / g_avg)`, where `g_i`
//! is target `i`'s weighted peak covariance and `g_avg` the geometric mean
//! of all of them. The moves sum to zero, so the cycle period is preserved;
//! targets above the mean gain observation time at the expense of those
//! below it until all peaks coincide.

use serde::Serialize;
use thiserror::Error;

use crate::graph::Tour;
use crate::linalg::Mat;
use crate::models::{Scenario, SolverSettings};
use crate::riccati::{self, CycleSettings, RiccatiError};

/// Dwell times are never pushed below this fraction of the period.
pub const FLOOR_FRACTION: f64 = 1e-6;
/// Clean rounds before a reduced gain is doubled again.
const GAIN_RECOVERY_ROUNDS: usize = 5;
/// Consecutive halvings tolerated within one round.
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BalanceError {
    #[error("peak value {value} of target {target} is not positive")]
    NonpositivePeak { target: usize, value: f64 },
    #[error("dwell time of target {0} is not positive")]
    NonpositiveDwell(usize),
    #[error("period {period} does not exceed tour travel time {travel}")]
    PeriodTooShort { period: f64, travel: f64 },
    #[error("invalid balancing input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

impl BalanceError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, BalanceError::Riccati(_) | BalanceError::NonpositivePeak { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceSettings {
    pub kp: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub cycle: CycleSettings,
}

impl Default for BalanceSettings {
    fn default() -> Self {
        Self::from(&SolverSettings::default())
    }
}

impl From<&SolverSettings> for BalanceSettings {
    fn from(s: &SolverSettings) -> Self {
        Self { kp: s.kp, tol: s.balance_tol, max_iters: s.max_balance_iters, cycle: s.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceState {
    pub iteration: usize,
    /// Dwell time per target, indexed by target id - 1.
    pub t_on: Vec<f64>,
    /// Weighted peak `g_i(||Pbar_i||)` per target.
    pub peaks: Vec<f64>,
    pub g_avg: f64,
    pub spread: f64,
    pub cost: f64,
    /// Gain that produced this state (the configured gain for the initial state).
    pub gain: f64,
}

impl BalanceState {
    pub fn relative_spread(&self) -> f64 {
        self.spread / self.g_avg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceStatus {
    Converged,
    /// Iteration budget exhausted, or step control could not find a
    /// non-increasing step.
    MaxIters,
    /// Every admissible step would push a dwell time below the positivity
    /// floor.
    FloorHit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceTrace {
    pub period: f64,
    pub travel_time: f64,
    pub states: Vec<BalanceState>,
    pub status: BalanceStatus,
    /// Rejected steps (the max peak would have grown).
    pub rejected_steps: usize,
}

impl BalanceTrace {
    pub fn last(&self) -> &BalanceState {
        self.states.last().expect("trace always holds the initial state")
    }

    pub fn iterations(&self) -> usize {
        self.last().iteration
    }

    /// Equalized cost: `g_avg` of the final state when converged, otherwise
    /// the minimax cost of the final state.
    pub fn equalized_cost(&self) -> f64 {
        let last = self.last();
        match self.status {
            BalanceStatus::Converged => last.g_avg,
            _ => last.cost,
        }
    }
}

/// `(prod v_i)^(1/M)`, via logarithms.
pub fn geometric_mean(v: &[f64]) -> f64 {
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

/// One consensus update. The increments are re-centred so they sum to zero
/// to machine precision.
pub fn balance_step(t_on: &[f64], peaks: &[f64], kp: f64) -> Result<Vec<f64>, BalanceError> {
    if t_on.len() != peaks.len() || t_on.is_empty() {
        return Err(BalanceError::BadInput(format!(
            "{} dwell times for {} peaks",
            t_on.len(),
            peaks.len()
        )));
    }
    if let Some(k) = peaks.iter().position(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(BalanceError::NonpositivePeak { target: k + 1, value: peaks[k] });
    }
    if let Some(k) = t_on.iter().position(|&t| t.is_nan() || t <= 0.0) {
        return Err(BalanceError::NonpositiveDwell(k + 1));
    }
    let max = peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = peaks.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(t_on.to_vec());
    }
    let logs: Vec<f64> = peaks.iter().map(|p| p.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / logs.len() as f64;
    let mut delta: Vec<f64> = logs.iter().map(|l| kp * (l - mean_log)).collect();
    let drift = delta.iter().sum::<f64>() / delta.len() as f64;
    delta.iter_mut().for_each(|d| *d -= drift);
    Ok(t_on.iter().zip(&delta).map(|(t, d)| t + d).collect())
}

/// Peak evaluator for a fixed single-visit tour: target `i` is unobserved
/// for the whole period except its own dwell.
struct PeakOracle<'a> {
    scenario: &'a Scenario,
    travel: f64,
    cycle: CycleSettings,
    warm: Vec<Option<Mat>>,
}

impl<'a> PeakOracle<'a> {
    fn new(scenario: &'a Scenario, travel: f64, cycle: CycleSettings) -> Self {
        Self { scenario, travel, cycle, warm: vec![None; scenario.len()] }
    }

    fn weighted(&mut self, t_on: &[f64]) -> Result<Vec<f64>, RiccatiError> {
        let total: f64 = t_on.iter().sum::<f64>() + self.travel;
        let mut out = Vec::with_capacity(t_on.len());
        let mut mats = Vec::with_capacity(t_on.len());
        for (i, &on) in t_on.iter().enumerate() {
            let m = &self.scenario.targets[i];
            let peak =
                riccati::single_visit_peak(m, on, total - on, &self.cycle, self.warm[i].as_ref())?;
            out.push(self.scenario.weighted(i, &peak));
            mats.push(peak);
        }
        self.warm = mats.into_iter().map(Some).collect();
        Ok(out)
    }
}

fn summarize(iteration: usize, t_on: Vec<f64>, peaks: Vec<f64>, gain: f64) -> BalanceState {
    let max = peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = peaks.iter().copied().fold(f64::INFINITY, f64::min);
    let g_avg = geometric_mean(&peaks);
    BalanceState { iteration, t_on, peaks, g_avg, spread: max - min, cost: max, gain }
}

fn check_tour(s: &Scenario, tour: &Tour) -> Result<(), BalanceError> {
    let mut ids = tour.order.clone();
    ids.sort_unstable();
    if ids != (1..=s.len()).collect::<Vec<_>>() {
        return Err(BalanceError::BadInput(
            "tour must visit every target exactly once".to_string(),
        ));
    }
    Ok(())
}

/// Uniform split of the free time `period - travel`.
pub fn uniform_allocation(m: usize, period: f64, travel: f64) -> Vec<f64> {
    vec![(period - travel) / m as f64; m]
}

/// Runs the consensus update until the relative peak spread drops to
/// `tol`, with step control: a round whose maximum peak would grow, or
/// whose dwell times would cross the floor, is retried at half gain, and
/// the gain recovers after clean rounds.
pub fn balance_until_converged(
    s: &Scenario,
    tour: &Tour,
    period: f64,
    t_on0: &[f64],
    settings: &BalanceSettings,
) -> Result<BalanceTrace, BalanceError> {
    check_tour(s, tour)?;
    let travel = tour.travel_time;
    if period.is_nan() || period <= travel {
        return Err(BalanceError::PeriodTooShort { period, travel });
    }
    if t_on0.len() != s.len() {
        return Err(BalanceError::BadInput(format!(
            "{} initial dwell times for {} targets",
            t_on0.len(),
            s.len()
        )));
    }
    if let Some(k) = t_on0.iter().position(|&t| t.is_nan() || t <= 0.0) {
        return Err(BalanceError::NonpositiveDwell(k + 1));
    }
    let free = period - travel;
    let total: f64 = t_on0.iter().sum();
    if (total - free).abs() > 1e-9 * period {
        return Err(BalanceError::BadInput(format!(
            "initial dwell times sum to {total}, expected period - travel = {free}"
        )));
    }

    let floor = FLOOR_FRACTION * period;
    let mut oracle = PeakOracle::new(s, travel, settings.cycle);
    let mut t_on = t_on0.to_vec();
    let mut peaks = oracle.weighted(&t_on)?;
    let mut states = vec![summarize(0, t_on.clone(), peaks.clone(), settings.kp)];
    let mut gain = settings.kp;
    let mut clean = 0usize;
    let mut rejected = 0usize;

    let status = loop {
        let current = states.last().expect("nonempty");
        if current.relative_spread() <= settings.tol {
            break BalanceStatus::Converged;
        }
        if current.iteration >= settings.max_iters {
            break BalanceStatus::MaxIters;
        }
        let old_max = current.cost;
        let mut accepted = None;
        let mut floor_blocked = false;
        for _ in 0..MAX_HALVINGS {
            let cand = balance_step(&t_on, &peaks, gain)?;
            let crossing: Vec<usize> = (0..cand.len()).filter(|&i| cand[i] < floor).collect();
            floor_blocked = !crossing.is_empty();
            if floor_blocked {
                // a dwell time already sitting at the floor and still pushed
                // down cannot be helped by a smaller gain
                if crossing.iter().any(|&i| t_on[i] <= 2.0 * floor) {
                    break;
                }
                rejected += 1;
                gain *= 0.5;
                clean = 0;
                continue;
            }
            let cand_peaks = oracle.weighted(&cand)?;
            let new_max = cand_peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if new_max <= old_max {
                accepted = Some((cand, cand_peaks));
                break;
            }
            rejected += 1;
            gain *= 0.5;
            clean = 0;
        }
        let Some((cand, cand_peaks)) = accepted else {
            break if floor_blocked { BalanceStatus::FloorHit } else { BalanceStatus::MaxIters };
        };
        t_on = cand;
        peaks = cand_peaks;
        let iteration = current.iteration + 1;
        states.push(summarize(iteration, t_on.clone(), peaks.clone(), gain));
        clean += 1;
        if clean >= GAIN_RECOVERY_ROUNDS && gain < settings.kp {
            gain = (gain * 2.0).min(settings.kp);
            clean = 0;
        }
    };

    Ok(BalanceTrace { period, travel_time: travel, states, status, rejected_steps: rejected })
}

/// `f(T)`: balance from `t_on0` (uniform when `None`) and return the
/// equalized cost with the trace.
pub fn equalized_cost(
    s: &Scenario,
    tour: &Tour,
    period: f64,
    t_on0: Option<&[f64]>,
    settings: &BalanceSettings,
) -> Result<(f64, BalanceTrace), BalanceError> {
    let uniform;
    let init = match t_on0 {
        Some(v) => v,
        None => {
            uniform = uniform_allocation(s.len(), period, tour.travel_time);
            &uniform
        }
    };
    let trace = balance_until_converged(s, tour, period, init, settings)?;
    Ok((trace.equalized_cost(), trace))
}
