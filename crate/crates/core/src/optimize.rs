//! Period search and the end-to-end scheduling pipeline.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::balance::{self, BalanceError, BalanceSettings, BalanceTrace};
use crate::graph::{self, GraphError, Tour, EXACT_TSP_CAP};
use crate::models::{Scenario, SolverSettings};
use crate::riccati::{self, CovTrajectory, CycleSettings, PeakSet, RiccatiError};
use crate::schedule::{self, AgentSchedule, ScheduleError, TargetTimeline};

/// `(1 + sqrt 5) / 2`.
pub const GOLDEN_RATIO: f64 = 1.618_033_988_749_895;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("invalid bracket [{lo}, {hi}] with tolerance {eps}")]
    InvalidBracket { lo: f64, hi: f64, eps: f64 },
    #[error("evaluating f(T) at T = {period} failed: {source}")]
    ProbeFailed { period: f64, source: BalanceError },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
}

impl OptimizeError {
    pub fn is_validation(&self) -> bool {
        match self {
            OptimizeError::InvalidBracket { .. } | OptimizeError::Schedule(_) => true,
            OptimizeError::Graph(e) => !matches!(e, GraphError::TooLarge(_)),
            OptimizeError::Balance(e) => e.is_validation(),
            OptimizeError::ProbeFailed { .. } | OptimizeError::Riccati(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodSearchResult {
    pub t_star: f64,
    pub f_star: f64,
    /// Every evaluated `(T, f(T))` in evaluation order; the last is `T*`.
    pub probes: Vec<(f64, f64)>,
    /// Bracket after each iteration, starting with the initial one.
    pub brackets: Vec<(f64, f64)>,
    pub iterations: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub eps: f64,
}

/// Golden-section minimization of `f` over `[t_min, t_max]`.
///
/// Keeps two interior probes at the golden-ratio points, drops the side of
/// the worse one and reuses the surviving probe, so each iteration costs a
/// single new evaluation. Stops once the bracket is narrower than `eps` and
/// returns its midpoint (evaluated once more).
pub fn golden_section<F, E>(
    mut f: F,
    t_min: f64,
    t_max: f64,
    eps: f64,
) -> Result<PeriodSearchResult, E>
where
    F: FnMut(f64) -> Result<f64, E>,
    E: From<OptimizeError>,
{
    if !(t_max > t_min && t_min.is_finite() && t_max.is_finite() && eps > 0.0) {
        return Err(OptimizeError::InvalidBracket { lo: t_min, hi: t_max, eps }.into());
    }
    let mut probes = Vec::new();
    let mut eval = |t: f64, probes: &mut Vec<(f64, f64)>| -> Result<f64, E> {
        let v = f(t)?;
        probes.push((t, v));
        Ok(v)
    };
    let (mut lo, mut hi) = (t_min, t_max);
    let mut brackets = vec![(lo, hi)];
    let mut t1 = hi - (hi - lo) / GOLDEN_RATIO;
    let mut t2 = lo + (hi - lo) / GOLDEN_RATIO;
    let mut f1 = eval(t1, &mut probes)?;
    let mut f2 = eval(t2, &mut probes)?;
    let mut iterations = 0;
    while hi - lo >= eps {
        iterations += 1;
        if f2 > f1 {
            hi = t2;
            brackets.push((lo, hi));
            t2 = t1;
            f2 = f1;
            t1 = hi - (hi - lo) / GOLDEN_RATIO;
            if hi - lo >= eps {
                f1 = eval(t1, &mut probes)?;
            }
        } else {
            lo = t1;
            brackets.push((lo, hi));
            t1 = t2;
            f1 = f2;
            t2 = lo + (hi - lo) / GOLDEN_RATIO;
            if hi - lo >= eps {
                f2 = eval(t2, &mut probes)?;
            }
        }
    }
    let t_star = 0.5 * (lo + hi);
    let f_star = eval(t_star, &mut probes)?;
    Ok(PeriodSearchResult { t_star, f_star, probes, brackets, iterations, t_min, t_max, eps })
}

/// Upper bound on golden-section evaluations for a bracket of width `w`.
pub fn probe_bound(width: f64, eps: f64) -> usize {
    ((eps / width).ln() / (1.0 / GOLDEN_RATIO).ln()).ceil().max(0.0) as usize + 2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    /// Search tolerance as a fraction of the tour travel time.
    pub eps_scale: f64,
    pub tmin_scale: f64,
    pub tmax_scale: f64,
    pub balance: BalanceSettings,
    /// Reuse the nearest probe's allocation as the starting point.
    pub warm_start: bool,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self::from(&SolverSettings::default())
    }
}

impl From<&SolverSettings> for OptimizeOptions {
    fn from(s: &SolverSettings) -> Self {
        Self {
            eps_scale: s.eps_scale,
            tmin_scale: s.tmin_scale,
            tmax_scale: s.tmax_scale,
            balance: s.into(),
            warm_start: true,
        }
    }
}

/// Search bracket and tolerance derived from the tour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bracket {
    pub t_min: f64,
    pub t_max: f64,
    pub eps: f64,
    /// Lower end was raised to keep positive free time.
    pub raised_lower: bool,
    /// Tour has zero travel time, so scales apply to one time unit.
    pub unit_reference: bool,
}

/// Lowest admissible period as a multiple of the travel time.
pub const MIN_PERIOD_FACTOR: f64 = 1.01;

pub fn bracket_for(travel: f64, opts: &OptimizeOptions) -> Result<Bracket, OptimizeError> {
    let unit_reference = travel <= 0.0;
    let reference = if unit_reference { 1.0 } else { travel };
    let mut t_min = opts.tmin_scale * reference;
    let t_max = opts.tmax_scale * reference;
    let eps = opts.eps_scale * reference;
    let floor = MIN_PERIOD_FACTOR * travel;
    let raised_lower = !unit_reference && t_min <= floor;
    if raised_lower {
        t_min = floor;
    }
    if !(t_max > t_min && t_min > 0.0 && eps > 0.0) {
        return Err(OptimizeError::InvalidBracket { lo: t_min, hi: t_max, eps });
    }
    Ok(Bracket { t_min, t_max, eps, raised_lower, unit_reference })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationReport {
    pub tour: Tour,
    pub bracket: Bracket,
    pub t_star: f64,
    /// Dwell time per target (index = id - 1) at `T*`.
    pub allocation: Vec<f64>,
    /// Weighted peak per target at `T*`.
    pub peaks: Vec<f64>,
    /// Minimax cost at `T*`.
    pub cost: f64,
    /// `f(T*)` from the final balancing run.
    pub f_star: f64,
    pub relative_spread: f64,
    pub equal_peaks: bool,
    /// `T*` lies within `eps` of a bracket end.
    pub boundary_solution: bool,
    /// Balancing run at `T*` from a uniform allocation.
    pub trace: BalanceTrace,
    pub search: PeriodSearchResult,
}

impl OptimizationReport {
    pub fn schedule(&self) -> AgentSchedule {
        let dwell = self.tour.order.iter().map(|&id| self.allocation[id - 1]).collect();
        AgentSchedule::new(self.tour.order.clone(), dwell)
    }
}

/// Golden-section search of the equalized cost over the period.
pub fn optimize_period(
    s: &Scenario,
    tour: &Tour,
    opts: &OptimizeOptions,
) -> Result<OptimizationReport, OptimizeError> {
    let travel = tour.travel_time;
    let bracket = bracket_for(travel, opts)?;
    let mut evaluated: Vec<(f64, Vec<f64>)> = Vec::new();
    let f = |period: f64| -> Result<f64, OptimizeError> {
        let warm = if opts.warm_start {
            evaluated
                .iter()
                .min_by(|a, b| (a.0 - period).abs().total_cmp(&(b.0 - period).abs()))
                .map(|(t_old, alloc)| {
                    let scale = (period - travel) / (t_old - travel);
                    alloc.iter().map(|x| x * scale).collect::<Vec<f64>>()
                })
        } else {
            None
        };
        let (value, trace) =
            balance::equalized_cost(s, tour, period, warm.as_deref(), &opts.balance)
                .map_err(|source| OptimizeError::ProbeFailed { period, source })?;
        evaluated.push((period, trace.last().t_on.clone()));
        Ok(value)
    };
    let search = golden_section(f, bracket.t_min, bracket.t_max, bracket.eps)?;
    let t_star = search.t_star;

    let (f_star, trace) = balance::equalized_cost(s, tour, t_star, None, &opts.balance)
        .map_err(|source| OptimizeError::ProbeFailed { period: t_star, source })?;
    let last = trace.last().clone();
    let relative_spread = last.relative_spread();
    Ok(OptimizationReport {
        tour: tour.clone(),
        bracket,
        t_star,
        allocation: last.t_on.clone(),
        peaks: last.peaks.clone(),
        cost: last.cost,
        f_star,
        relative_spread,
        equal_peaks: relative_spread <= opts.balance.tol,
        boundary_solution: t_star - bracket.t_min <= bracket.eps
            || bracket.t_max - t_star <= bracket.eps,
        trace,
        search,
    })
}

/// Tour used by the pipeline: exact when small enough, heuristic otherwise.
pub fn choose_tour(s: &Scenario) -> Result<Tour, GraphError> {
    if s.len() <= EXACT_TSP_CAP {
        graph::solve_tsp_exact(&s.graph)
    } else {
        graph::solve_tsp_heuristic(&s.graph)
    }
}

/// Pipeline output: the report plus the limit cycle of every target on the
/// optimized schedule.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub report: OptimizationReport,
    pub schedule: AgentSchedule,
    pub timelines: Vec<TargetTimeline>,
    pub trajectories: Vec<CovTrajectory>,
    pub peak_sets: Vec<PeakSet>,
    /// Minimax cost recomputed from the limit cycles.
    pub cost: f64,
}

/// Per-target timelines, limit cycles and peaks, ordered by target id.
pub type ScheduleEvaluation = (Vec<TargetTimeline>, Vec<CovTrajectory>, Vec<PeakSet>);

/// Limit cycles and peaks of every target under a schedule.
pub fn evaluate_schedule(
    s: &Scenario,
    sched: &AgentSchedule,
    cycle: &CycleSettings,
) -> Result<ScheduleEvaluation, OptimizeError> {
    let timelines = schedule::to_target_view(sched, &s.graph)?;
    let trajectories = timelines
        .par_iter()
        .map(|tl| {
            let idx = s.index_of(tl.target).expect("validated ids");
            riccati::steady_state_cycle(&s.targets[idx], tl, cycle)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let peak_sets = trajectories
        .iter()
        .map(|traj| {
            let idx = s.index_of(traj.target).expect("validated ids");
            riccati::extract_peaks(traj, &s.targets[idx].weight, s.norm)
        })
        .collect();
    Ok((timelines, trajectories, peak_sets))
}

/// Tour selection, period search, and a final limit-cycle solve on the
/// optimized schedule.
pub fn run_pipeline(s: &Scenario, opts: &OptimizeOptions) -> Result<PipelineResult, OptimizeError> {
    let tour = choose_tour(s)?;
    let report = optimize_period(s, &tour, opts)?;
    let sched = report.schedule();
    let (timelines, trajectories, peak_sets) = evaluate_schedule(s, &sched, &opts.balance.cycle)?;
    let cost = riccati::cost(&peak_sets);
    Ok(PipelineResult { report, schedule: sched, timelines, trajectories, peak_sets, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MonitoringGraph;
    use crate::models::TargetModel;

    #[derive(Debug)]
    struct Never;
    impl From<OptimizeError> for Never {
        fn from(_: OptimizeError) -> Self {
            Never
        }
    }

    fn ok(f: impl Fn(f64) -> f64) -> impl FnMut(f64) -> Result<f64, Never> {
        move |t| Ok(f(t))
    }

    #[test]
    fn parabola_minimum() {
        let r = golden_section(ok(|t| (t - 2.0).powi(2)), 0.0, 5.0, 1e-4).unwrap();
        assert!((r.t_star - 2.0).abs() <= 1e-4);
        assert!(r.probes.len() <= 25);
        assert!(r.probes.len() <= probe_bound(5.0, 1e-4));
    }

    #[test]
    fn nonsmooth_minimum() {
        let f = |t: f64| (t - 1.0).abs() + 0.1 * (t - 1.0).powi(2);
        let r = golden_section(ok(f), 0.0, 3.0, 1e-3).unwrap();
        assert!((r.t_star - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn constant_function_shrinks_geometrically() {
        let r = golden_section(ok(|_| 1.0), 0.0, 1.0, 1e-3).unwrap();
        assert!(r.t_star >= 0.0 && r.t_star <= 1.0);
        for w in r.brackets.windows(2) {
            let (a, b) = (w[0].1 - w[0].0, w[1].1 - w[1].0);
            assert!((b / a - 1.0 / GOLDEN_RATIO).abs() < 1e-9);
            assert!(w[1].0 >= w[0].0 && w[1].1 <= w[0].1);
        }
    }

    #[test]
    fn invalid_bracket() {
        let r: Result<_, OptimizeError> =
            golden_section(|t: f64| Ok::<f64, OptimizeError>(t), 2.0, 1.0, 1e-3);
        assert!(matches!(r, Err(OptimizeError::InvalidBracket { .. })));
        let r: Result<_, OptimizeError> = golden_section(Ok, 0.0, 1.0, 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn bracket_raises_lower_end() {
        let b = bracket_for(2.0, &OptimizeOptions::default()).unwrap();
        assert!(b.raised_lower);
        assert_eq!(b.t_min, 2.02);
        assert_eq!(b.t_max, 6.0);
        let unit = bracket_for(0.0, &OptimizeOptions::default()).unwrap();
        assert!(unit.unit_reference && !unit.raised_lower);
        assert_eq!((unit.t_min, unit.t_max), (0.1, 3.0));
    }

    fn pair(swap: bool) -> Scenario {
        let mut t = vec![TargetModel::scalar(1, 0.3, 1.0, 2.0), TargetModel::scalar(2, 0.3, 1.0, 2.0)];
        if swap {
            t.swap(0, 1);
            t[0].id = 1;
            t[1].id = 2;
        }
        Scenario::new(t, MonitoringGraph::euclidean(&[[0.0, 0.0], [0.4, 0.3]]).unwrap())
    }

    #[test]
    fn identical_pair_is_symmetric() {
        let a = run_pipeline(&pair(false), &OptimizeOptions::default()).unwrap();
        let b = run_pipeline(&pair(true), &OptimizeOptions::default()).unwrap();
        assert_eq!(a.report.t_star, b.report.t_star);
        assert!((a.report.allocation[0] - a.report.allocation[1]).abs() < 1e-12);
    }

    #[test]
    fn single_target_pipeline() {
        let s = Scenario::new(
            vec![TargetModel::scalar(1, 0.3487, 1.1924, 2.3140)],
            MonitoringGraph::euclidean(&[[0.1, 0.2]]).unwrap(),
        );
        let res = run_pipeline(&s, &OptimizeOptions::default()).unwrap();
        let g = 1.0 / 2.3140;
        let star = (0.3487 + (0.3487f64.powi(2) + 1.1924 * g).sqrt()) / g;
        // zero travel: the target is never left unobserved, so f is flat
        assert!((res.cost - star).abs() < 1e-8 * star);
        for &(_, f) in &res.report.search.probes {
            assert!((f - star).abs() < 1e-8 * star);
        }
    }
}
