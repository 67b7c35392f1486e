//! Agent schedules and per-target timelines.
//!
//! An [`AgentSchedule`] lists the targets visited in one cycle and how long
//! the agent dwells at each; travel between consecutive visits (wrapping from
//! the last back to the first) takes the graph travel time. Time zero is the
//! start of the first visit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::MonitoringGraph;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("schedule has no visits")]
    Empty,
    #[error("visit list has {0} entries but dwell list has {1}")]
    LengthMismatch(usize, usize),
    #[error("dwell time {0} at position {1} is negative or not finite")]
    BadDwell(f64, usize),
    #[error("visit {1} names unknown target id {0}")]
    UnknownTarget(usize, usize),
    #[error("target {0} is never visited")]
    UnvisitedTarget(usize),
    #[error("target {0} has no observation time in the cycle")]
    NoObservation(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSchedule {
    pub visits: Vec<usize>,
    pub dwell: Vec<f64>,
}

impl AgentSchedule {
    pub fn new(visits: Vec<usize>, dwell: Vec<f64>) -> Self {
        Self { visits, dwell }
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    /// Checks shape and that every target `1..=m` is visited.
    pub fn validate(&self, m: usize) -> Result<(), ScheduleError> {
        if self.visits.is_empty() {
            return Err(ScheduleError::Empty);
        }
        if self.visits.len() != self.dwell.len() {
            return Err(ScheduleError::LengthMismatch(self.visits.len(), self.dwell.len()));
        }
        for (q, &t) in self.dwell.iter().enumerate() {
            if !(t.is_finite() && t >= 0.0) {
                return Err(ScheduleError::BadDwell(t, q + 1));
            }
        }
        let mut seen = vec![false; m];
        for (q, &id) in self.visits.iter().enumerate() {
            if id == 0 || id > m {
                return Err(ScheduleError::UnknownTarget(id, q + 1));
            }
            seen[id - 1] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(ScheduleError::UnvisitedTarget(k + 1));
        }
        Ok(())
    }
}

/// Position lists of each target in the visit sequence plus the inverse
/// maps. Positions are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitPositions {
    pub by_target: BTreeMap<usize, Vec<usize>>,
    /// `target_at[q - 1]`: target visited at position `q`.
    pub target_at: Vec<usize>,
    /// `visit_index_at[q - 1]`: which visit (1-based) of that target `q` is.
    pub visit_index_at: Vec<usize>,
}

impl VisitPositions {
    pub fn count(&self, id: usize) -> usize {
        self.by_target.get(&id).map_or(0, Vec::len)
    }
}

pub fn visit_positions(visits: &[usize]) -> VisitPositions {
    let mut by_target: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut visit_index_at = Vec::with_capacity(visits.len());
    for (q0, &id) in visits.iter().enumerate() {
        let list = by_target.entry(id).or_default();
        list.push(q0 + 1);
        visit_index_at.push(list.len());
    }
    VisitPositions { by_target, target_at: visits.to_vec(), visit_index_at }
}

/// Cycle period: all dwell plus all travel legs, including the closing leg.
pub fn cycle_period(s: &AgentSchedule, g: &MonitoringGraph) -> f64 {
    let n = s.visits.len();
    let dwell: f64 = s.dwell.iter().sum();
    let travel: f64 = (0..n).map(|q| g.travel_ids(s.visits[q], s.visits[(q + 1) % n])).sum();
    dwell + travel
}

/// One target's view of the cycle: visit `k` starts at `visit_start[k]`,
/// lasts `t_on[k]`, and is followed by `t_off[k]` unobserved time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTimeline {
    pub target: usize,
    pub t_on: Vec<f64>,
    pub t_off: Vec<f64>,
    pub visit_start: Vec<f64>,
    pub visit_end: Vec<f64>,
    pub period: f64,
}

/// A constant-observation piece of a timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub observed: bool,
    pub start: f64,
    pub duration: f64,
}

impl TargetTimeline {
    /// Single visit per cycle starting at time zero.
    pub fn single(target: usize, t_on: f64, t_off: f64) -> Self {
        Self {
            target,
            t_on: vec![t_on],
            t_off: vec![t_off],
            visit_start: vec![0.0],
            visit_end: vec![t_on],
            period: t_on + t_off,
        }
    }

    pub fn visits(&self) -> usize {
        self.t_on.len()
    }

    /// Pieces covering `[0, period]` in order. The first piece is the tail
    /// of the last off segment when the first visit starts after zero;
    /// the last off segment is cut at `period`. Zero-length pieces are kept
    /// so that visit boundaries can be indexed uniformly.
    pub fn phases(&self) -> Vec<Phase> {
        let n = self.visits();
        let mut out = Vec::with_capacity(2 * n + 1);
        out.push(Phase { observed: false, start: 0.0, duration: self.visit_start[0] });
        for k in 0..n {
            out.push(Phase { observed: true, start: self.visit_start[k], duration: self.t_on[k] });
            let next = if k + 1 < n { self.visit_start[k + 1] } else { self.period };
            let end = self.visit_end[k];
            out.push(Phase { observed: false, start: end, duration: (next - end).max(0.0) });
        }
        out
    }

    /// Index into [`Self::phases`] of the observed piece of visit `k`.
    pub fn on_phase_index(k: usize) -> usize {
        1 + 2 * k
    }
}

/// Per-target timelines, ordered by target id. Off times follow the
/// position-list form: travel to the next visited node, then every
/// intermediate visit's dwell and onward leg, wrapping cyclically.
pub fn to_target_view(
    s: &AgentSchedule,
    g: &MonitoringGraph,
) -> Result<Vec<TargetTimeline>, ScheduleError> {
    s.validate(g.len())?;
    let n = s.visits.len();
    let period = cycle_period(s, g);
    let pos = visit_positions(&s.visits);

    // absolute start of every visit
    let mut starts = Vec::with_capacity(n);
    let mut clock = 0.0;
    for q in 0..n {
        starts.push(clock);
        clock += s.dwell[q] + g.travel_ids(s.visits[q], s.visits[(q + 1) % n]);
    }

    let leg = |q: usize| g.travel_ids(s.visits[q % n], s.visits[(q + 1) % n]);
    let mut out = Vec::with_capacity(pos.by_target.len());
    for (&id, plist) in &pos.by_target {
        let ni = plist.len();
        let mut t_on = Vec::with_capacity(ni);
        let mut t_off = Vec::with_capacity(ni);
        let mut visit_start = Vec::with_capacity(ni);
        let mut visit_end = Vec::with_capacity(ni);
        for k in 0..ni {
            let p = plist[k] - 1;
            let next = if k + 1 < ni { plist[k + 1] - 1 } else { plist[0] - 1 + n };
            let mut off = leg(p);
            for q in p + 1..next {
                off += s.dwell[q % n] + leg(q);
            }
            t_on.push(s.dwell[p]);
            t_off.push(off);
            visit_start.push(starts[p]);
            visit_end.push(starts[p] + s.dwell[p]);
        }
        out.push(TargetTimeline { target: id, t_on, t_off, visit_start, visit_end, period });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EventKind {
    Dwell { target: usize },
    Travel { from: usize, to: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    #[serde(flatten)]
    pub kind: EventKind,
    pub start: f64,
    pub duration: f64,
}

/// Chronological dwell/travel events of one cycle.
pub fn event_list(s: &AgentSchedule, g: &MonitoringGraph) -> Vec<Event> {
    let n = s.visits.len();
    let mut out = Vec::with_capacity(2 * n);
    let mut clock = 0.0;
    for q in 0..n {
        let here = s.visits[q];
        let next = s.visits[(q + 1) % n];
        out.push(Event { kind: EventKind::Dwell { target: here }, start: clock, duration: s.dwell[q] });
        clock += s.dwell[q];
        let d = g.travel_ids(here, next);
        out.push(Event { kind: EventKind::Travel { from: here, to: next }, start: clock, duration: d });
        clock += d;
    }
    out
}

/// Whether `target` is observed at cycle phase `t` (taken modulo the period).
pub fn observed_at(events: &[Event], period: f64, target: usize, t: f64) -> bool {
    let phase = if period > 0.0 { t.rem_euclid(period) } else { 0.0 };
    events.iter().any(|e| match e.kind {
        EventKind::Dwell { target: id } => {
            id == target && phase >= e.start && phase < e.start + e.duration
        }
        EventKind::Travel { .. } => false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(n: usize, d: f64) -> MonitoringGraph {
        let rows: Vec<Vec<Option<f64>>> = (0..n)
            .map(|i| (0..n).map(|j| Some(if i == j { 0.0 } else { d })).collect())
            .collect();
        MonitoringGraph::from_travel_times(&rows).unwrap()
    }

    /// Independent oracle: walk the flat event list twice around the cycle
    /// and read each target's dwell and gap lengths directly.
    fn oracle(s: &AgentSchedule, g: &MonitoringGraph) -> BTreeMap<usize, (Vec<f64>, Vec<f64>)> {
        let ev = event_list(s, g);
        let period: f64 = ev.iter().map(|e| e.duration).sum();
        let mut out: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let dwells: Vec<(usize, f64, f64)> = ev
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Dwell { target } => Some((target, e.start, e.duration)),
                _ => None,
            })
            .collect();
        for (k, &(id, start, dur)) in dwells.iter().enumerate() {
            let end = start + dur;
            let next_start = dwells
                .iter()
                .cycle()
                .skip(k + 1)
                .take(dwells.len())
                .enumerate()
                .find(|(_, d)| d.0 == id)
                .map(|(j, d)| if k + 1 + j >= dwells.len() { d.1 + period } else { d.1 })
                .unwrap();
            let entry = out.entry(id).or_default();
            entry.0.push(dur);
            entry.1.push(next_start - end);
        }
        out
    }

    #[test]
    fn positions_of_repeated_visits() {
        let p = visit_positions(&[1, 2, 1]);
        assert_eq!(p.by_target[&1], vec![1, 3]);
        assert_eq!(p.by_target[&2], vec![2]);
        assert_eq!(p.count(1), 2);
        assert_eq!(p.count(2), 1);

        let p = visit_positions(&[7]);
        assert_eq!(p.by_target[&7], vec![1]);
        assert_eq!((p.target_at[0], p.visit_index_at[0]), (7, 1));

        let p = visit_positions(&[3, 1, 2, 3]);
        assert_eq!(p.by_target[&3], vec![1, 4]);
        assert_eq!((p.target_at[3], p.visit_index_at[3]), (3, 2));
    }

    #[test]
    fn two_targets_off_time() {
        let g = uniform(2, 0.5);
        let s = AgentSchedule::new(vec![1, 2], vec![1.5, 2.0]);
        let tl = to_target_view(&s, &g).unwrap();
        assert_eq!(tl[0].t_off, vec![3.0]);
        assert_eq!(tl[1].t_off, vec![0.5 + 1.5 + 0.5]);
        assert_eq!(cycle_period(&AgentSchedule::new(vec![1, 2], vec![1.0, 2.0]), &g), 4.0);
    }

    #[test]
    fn single_node_cycle() {
        let g = uniform(1, 0.0);
        let s = AgentSchedule::new(vec![1], vec![2.5]);
        let tl = to_target_view(&s, &g).unwrap();
        assert_eq!(tl[0].t_off, vec![0.0]);
        assert_eq!(tl[0].period, 2.5);
        assert_eq!(cycle_period(&s, &g), 2.5);
    }

    #[test]
    fn repeated_visit_wraps() {
        let g = uniform(2, 0.5);
        let s = AgentSchedule::new(vec![1, 2, 1], vec![1.0, 1.0, 1.0]);
        let tl = to_target_view(&s, &g).unwrap();
        // target 1: leave at 1, back at 1 + 0.5 + 1 + 0.5 = 3; the closing
        // leg 1 -> 1 has zero length
        assert_eq!(tl[0].t_on, vec![1.0, 1.0]);
        assert_eq!(tl[0].t_off, vec![2.0, 0.0]);
        // three dwell + legs 1->2, 2->1, 1->1 (zero)
        assert_eq!(tl[0].period, 4.0);
        let total: f64 = tl[0].t_on.iter().chain(&tl[0].t_off).sum();
        assert_eq!(total, 4.0);
        let o = oracle(&s, &g);
        assert_eq!(o[&1].1, tl[0].t_off);
        assert_eq!(o[&2].1, tl[1].t_off);
    }

    #[test]
    fn unvisited_target_rejected() {
        let g = uniform(3, 1.0);
        let s = AgentSchedule::new(vec![1, 2], vec![1.0, 1.0]);
        assert_eq!(to_target_view(&s, &g), Err(ScheduleError::UnvisitedTarget(3)));
        let s = AgentSchedule::new(vec![1, 4, 2, 3], vec![1.0; 4]);
        assert_eq!(to_target_view(&s, &g), Err(ScheduleError::UnknownTarget(4, 2)));
        let s = AgentSchedule::new(vec![1, 2, 3], vec![1.0, -1.0, 1.0]);
        assert!(matches!(to_target_view(&s, &g), Err(ScheduleError::BadDwell(_, 2))));
    }

    #[test]
    fn phases_cover_period() {
        let g = uniform(3, 0.25);
        let s = AgentSchedule::new(vec![1, 2, 3, 2], vec![0.5, 1.0, 0.75, 0.0]);
        for tl in to_target_view(&s, &g).unwrap() {
            let ph = tl.phases();
            let total: f64 = ph.iter().map(|p| p.duration).sum();
            assert!((total - tl.period).abs() < 1e-12);
            for w in ph.windows(2) {
                assert!((w[0].start + w[0].duration - w[1].start).abs() < 1e-12);
            }
            for k in 0..tl.visits() {
                let on = ph[TargetTimeline::on_phase_index(k)];
                assert!(on.observed);
                assert_eq!(on.start, tl.visit_start[k]);
            }
        }
    }

    #[test]
    fn observation_flag_from_events() {
        let g = uniform(2, 0.5);
        let s = AgentSchedule::new(vec![1, 2], vec![1.0, 2.0]);
        let ev = event_list(&s, &g);
        assert!(observed_at(&ev, 4.0, 1, 0.5));
        assert!(!observed_at(&ev, 4.0, 1, 1.2));
        assert!(observed_at(&ev, 4.0, 2, 2.0));
        assert!(observed_at(&ev, 4.0, 1, 4.5));
    }

    fn arb_schedule() -> impl Strategy<Value = (usize, AgentSchedule, Vec<f64>)> {
        (2usize..5).prop_flat_map(|m| {
            let extra = proptest::collection::vec(1..=m, 0..4);
            let dwell = proptest::collection::vec(0.0f64..2.0, m + 4);
            let lens = proptest::collection::vec(0.05f64..1.0, m * m);
            (Just(m), extra, dwell, lens).prop_map(|(m, extra, dwell, lens)| {
                let mut visits: Vec<usize> = (1..=m).collect();
                visits.extend(extra);
                let n = visits.len();
                (m, AgentSchedule::new(visits, dwell[..n].to_vec()), lens)
            })
        })
    }

    fn graph_from(m: usize, lens: &[f64]) -> MonitoringGraph {
        let rows: Vec<Vec<Option<f64>>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let (a, b) = if i < j { (i, j) } else { (j, i) };
                        Some(if i == j { 0.0 } else { lens[a * m + b] })
                    })
                    .collect()
            })
            .collect();
        MonitoringGraph::from_travel_times(&rows).unwrap()
    }

    proptest! {
        #[test]
        fn timelines_match_event_oracle((m, s, lens) in arb_schedule()) {
            let g = graph_from(m, &lens);
            let tls = to_target_view(&s, &g).unwrap();
            let period = cycle_period(&s, &g);
            let o = oracle(&s, &g);
            let n = s.len();
            let no_repeat = (0..n).all(|q| s.visits[q] != s.visits[(q + 1) % n]);
            for tl in &tls {
                let sum: f64 = tl.t_on.iter().chain(&tl.t_off).sum();
                prop_assert!((sum - period).abs() <= 1e-12 * period.max(1.0) * 4.0);
                let (on, off) = &o[&tl.target];
                prop_assert_eq!(on, &tl.t_on);
                for (a, b) in off.iter().zip(&tl.t_off) {
                    prop_assert!((a - b).abs() <= 1e-12 * period.max(1.0) * 4.0);
                }
                for k in 0..tl.visits() {
                    prop_assert!((tl.visit_end[k] - tl.visit_start[k] - tl.t_on[k]).abs() < 1e-12);
                    let next = if k + 1 < tl.visits() { tl.visit_start[k + 1] } else { tl.visit_start[0] + period };
                    prop_assert!((tl.visit_end[k] + tl.t_off[k] - next).abs() <= 1e-12 * period.max(1.0) * 4.0);
                    if no_repeat {
                        prop_assert!(tl.t_off[k] > 0.0);
                    }
                }
            }
        }

        #[test]
        fn rotation_preserves_gap_multisets((m, s, lens) in arb_schedule(), shift in 0usize..8) {
            let g = graph_from(m, &lens);
            let n = s.len();
            let mut r = s.clone();
            r.visits.rotate_left(shift % n);
            r.dwell.rotate_left(shift % n);
            let a = to_target_view(&s, &g).unwrap();
            let b = to_target_view(&r, &g).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let mut px: Vec<(f64, f64)> = x.t_on.iter().copied().zip(x.t_off.iter().copied()).collect();
                let mut py: Vec<(f64, f64)> = y.t_on.iter().copied().zip(y.t_off.iter().copied()).collect();
                px.sort_by(|p, q| p.partial_cmp(q).unwrap());
                py.sort_by(|p, q| p.partial_cmp(q).unwrap());
                for (p, q) in px.iter().zip(&py) {
                    prop_assert!((p.0 - q.0).abs() < 1e-12 && (p.1 - q.1).abs() < 1e-9);
                }
            }
        }
    }
}
