//! CSV writers. Floats are written with 17 significant digits so values
//! survive a round trip bit for bit.

use crate::balance::BalanceTrace;
use crate::models::Scenario;
use crate::optimize::PeriodSearchResult;
use crate::riccati::CovTrajectory;
use crate::schedule::{Event, EventKind};
use crate::simkf::SimTrace;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let cells: Vec<String> = cells.into_iter().collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

/// `target_id, t, w_ij..., g` with `w` row-major; narrower targets leave
/// trailing entries empty.
pub fn trajectory_csv(s: &Scenario, trajs: &[CovTrajectory]) -> String {
    let l = trajs.iter().filter_map(|t| t.covs.first()).map(|c| c.nrows()).max().unwrap_or(1);
    let mut out = String::new();
    let mut header = vec!["target_id".to_string(), "t".to_string()];
    for i in 1..=l {
        for j in 1..=l {
            header.push(format!("w_{i}_{j}"));
        }
    }
    header.push("g".into());
    row(&mut out, header);
    for tr in trajs {
        let idx = s.index_of(tr.target).expect("trajectory target in scenario");
        for (t, w) in tr.times.iter().zip(&tr.covs) {
            let mut cells = vec![tr.target.to_string(), fmt_f64(*t)];
            for i in 0..l {
                for j in 0..l {
                    cells.push(if i < w.nrows() && j < w.ncols() { fmt_f64(w[(i, j)]) } else { String::new() });
                }
            }
            cells.push(fmt_f64(s.weighted(idx, w)));
            row(&mut out, cells);
        }
    }
    out
}

/// Golden-section probes in evaluation order.
pub fn probe_curve_csv(search: &PeriodSearchResult) -> String {
    let mut out = String::from("probe,period,f\n");
    for (k, (t, f)) in search.probes.iter().enumerate() {
        row(&mut out, [k.to_string(), fmt_f64(*t), fmt_f64(*f)]);
    }
    out
}

/// `iteration, t_on_i..., peak_i..., g_avg, cost` per balancing round.
pub fn balance_trace_csv(trace: &BalanceTrace, ids: &[usize]) -> String {
    let mut out = String::new();
    let mut header = vec!["iteration".to_string()];
    header.extend(ids.iter().map(|i| format!("t_on_{i}")));
    header.extend(ids.iter().map(|i| format!("peak_{i}")));
    header.extend(["g_avg".to_string(), "cost".to_string()]);
    row(&mut out, header);
    for st in &trace.states {
        let mut cells = vec![st.iteration.to_string()];
        cells.extend(st.t_on.iter().map(|&x| fmt_f64(x)));
        cells.extend(st.peaks.iter().map(|&x| fmt_f64(x)));
        cells.extend([fmt_f64(st.g_avg), fmt_f64(st.cost)]);
        row(&mut out, cells);
    }
    out
}

/// Per-round weighted peaks only.
pub fn peaks_csv(trace: &BalanceTrace, ids: &[usize]) -> String {
    let mut out = String::new();
    let mut header = vec!["iteration".to_string()];
    header.extend(ids.iter().map(|i| format!("peak_{i}")));
    row(&mut out, header);
    for st in &trace.states {
        let mut cells = vec![st.iteration.to_string()];
        cells.extend(st.peaks.iter().map(|&x| fmt_f64(x)));
        row(&mut out, cells);
    }
    out
}

/// Per-round dwell times only.
pub fn dwell_csv(trace: &BalanceTrace, ids: &[usize]) -> String {
    let mut out = String::new();
    let mut header = vec!["iteration".to_string()];
    header.extend(ids.iter().map(|i| format!("t_on_{i}")));
    row(&mut out, header);
    for st in &trace.states {
        let mut cells = vec![st.iteration.to_string()];
        cells.extend(st.t_on.iter().map(|&x| fmt_f64(x)));
        row(&mut out, cells);
    }
    out
}

pub fn events_csv(events: &[Event]) -> String {
    let mut out = String::from("kind,target,from,to,start,duration\n");
    for e in events {
        let (kind, target, from, to) = match e.kind {
            EventKind::Dwell { target } => ("dwell", target.to_string(), String::new(), String::new()),
            EventKind::Travel { from, to } => ("travel", String::new(), from.to_string(), to.to_string()),
        };
        row(&mut out, [kind.to_string(), target, from, to, fmt_f64(e.start), fmt_f64(e.duration)]);
    }
    out
}

/// `target_id, t, observed, x_i..., xhat_i..., w_ij...` per recorded sample.
pub fn sim_trace_csv(trace: &SimTrace) -> String {
    let l = trace.targets.iter().filter_map(|t| t.state.first()).map(|x| x.len()).max().unwrap_or(1);
    let mut out = String::new();
    let mut header = vec!["target_id".to_string(), "t".to_string(), "observed".to_string()];
    header.extend((1..=l).map(|i| format!("x_{i}")));
    header.extend((1..=l).map(|i| format!("xhat_{i}")));
    for i in 1..=l {
        for j in 1..=l {
            header.push(format!("w_{i}_{j}"));
        }
    }
    row(&mut out, header);
    let cell = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for tt in &trace.targets {
        for k in 0..tt.times.len() {
            let mut cells = vec![tt.target.to_string(), fmt_f64(tt.times[k]), (tt.observed[k] as u8).to_string()];
            cells.extend((0..l).map(|i| cell(tt.state[k].get(i).copied())));
            cells.extend((0..l).map(|i| cell(tt.estimate[k].get(i).copied())));
            let w = &tt.cov[k];
            for i in 0..l {
                for j in 0..l {
                    cells.push(cell((i < w.nrows() && j < w.ncols()).then(|| w[(i, j)])));
                }
            }
            row(&mut out, cells);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 2.653_124_5e-300, -7.5e12, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn events_have_header_and_rows() {
        let ev = vec![
            Event { kind: EventKind::Dwell { target: 1 }, start: 0.0, duration: 1.0 },
            Event { kind: EventKind::Travel { from: 1, to: 2 }, start: 1.0, duration: 0.5 },
        ];
        let csv = events_csv(&ev);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("dwell,1,,,"));
        assert!(lines[2].starts_with("travel,,1,2,"));
    }
}
