use std::collections::BTreeMap;

use pm_core::balance::{self, BalanceSettings};
use pm_core::config::{self, Loaded};
use pm_core::export;
use pm_core::graph::{self, Tour, EXACT_TSP_CAP};
use pm_core::models::Scenario;
use pm_core::optimize::{self, OptimizeOptions, PipelineResult};
use pm_core::presets;
use pm_core::riccati::CycleSettings;
use pm_core::schedule::{self, AgentSchedule};
use pm_core::simkf::{self, SimConfig};
use pm_core::Result;
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{sha256_hex, OutDir};
use crate::{
    BalanceArgs, Common, OptimizeArgs, ReproduceArgs, ScheduleArgs, SimulateArgs, TourArgs,
    ValidateArgs,
};

/// Flattens serialized arguments into `flag -> value` strings.
fn flags<T: Serialize>(args: &T) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
        if let Value::Object(map) = v {
            for (k, v) in map {
                walk(prefix, v, out);
                if !v.is_object() {
                    out.insert(format!("{prefix}{}", k.replace('_', "-")), render(v));
                }
            }
        }
    }
    fn render(v: &Value) -> String {
        match v {
            Value::String(s) => s.clone(),
            Value::Array(a) => a.iter().map(render).collect::<Vec<_>>().join(","),
            other => other.to_string(),
        }
    }
    let mut out = BTreeMap::new();
    walk("--", &serde_json::to_value(args).unwrap_or(Value::Null), &mut out);
    out
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("{}", json!({ "warning": w }));
    }
}

fn load(path: &std::path::Path, common: &Common) -> Result<Scenario> {
    let Loaded { value, warnings } = config::load_scenario(path, !common.lenient)?;
    warn_all(&warnings);
    Ok(value)
}

fn digest(s: &Scenario) -> String {
    sha256_hex(config::canonical_json(s).as_bytes())
}

fn open(root: &std::path::Path, command: &str, args: &impl Serialize, s: Option<&Scenario>) -> Result<OutDir> {
    let mut out = OutDir::create(root, command, flags(args))?;
    if let Some(s) = s {
        out.set_digest(digest(s));
    }
    Ok(out)
}

fn ids(s: &Scenario) -> Vec<usize> {
    s.targets.iter().map(|t| t.id).collect()
}

fn summary(command: &str, root: &std::path::Path, outputs: Vec<String>, extra: Value) -> Value {
    let mut v = json!({ "command": command, "out": root.display().to_string(), "outputs": outputs });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

pub fn validate(a: &ValidateArgs) -> Result<Value> {
    let s = load(&a.config, &a.common)?;
    let mut out = open(&a.common.out, "validate", a, Some(&s))?;
    let targets: Vec<Value> = s
        .targets
        .iter()
        .map(|t| json!({ "id": t.id, "label": t.label, "state_dim": t.state_dim(), "obs_dim": t.obs_dim() }))
        .collect();
    let info = json!({ "valid": true, "targets": targets, "nodes": s.graph.len(), "digest": digest(&s) });
    out.write_json("validation.json", &info)?;
    out.write("scenario.json", &(config::emit_scenario(&s) + "\n"))?;
    let files = out.finish()?;
    Ok(summary("validate", &a.common.out, files, json!({ "targets": s.len(), "digest": digest(&s) })))
}

pub fn tour(a: &TourArgs) -> Result<Value> {
    let s = load(&a.config, &a.common)?;
    let mut out = open(&a.common.out, "tour", a, Some(&s))?;
    let (t, method) = if a.heuristic || s.len() > EXACT_TSP_CAP {
        (graph::solve_tsp_heuristic(&s.graph)?, "nearest-neighbour+2-opt")
    } else {
        (graph::solve_tsp_exact(&s.graph)?, "held-karp")
    };
    let n = t.order.len();
    let legs: Vec<Value> = (0..n)
        .map(|k| {
            let (from, to) = (t.order[k], t.order[(k + 1) % n]);
            let route: Vec<usize> = s.graph.route(from - 1, to - 1).iter().map(|i| i + 1).collect();
            json!({ "from": from, "to": to, "travel_time": s.graph.travel_ids(from, to), "route": route })
        })
        .collect();
    out.write_json("tour.json", &json!({ "order": t.order, "travel_time": t.travel_time, "method": method, "legs": legs }))?;
    let files = out.finish()?;
    Ok(summary("tour", &a.common.out, files, json!({ "order": t.order, "travel_time": t.travel_time })))
}

pub fn schedule(a: &ScheduleArgs) -> Result<Value> {
    let s = load(&a.config, &a.common)?;
    let sched = AgentSchedule::new(a.sequence.clone(), a.dwell.clone());
    sched.validate(s.len())?;
    let mut out = open(&a.common.out, "schedule", a, Some(&s))?;
    let (timelines, trajectories, peak_sets) =
        optimize::evaluate_schedule(&s, &sched, &CycleSettings::from(&s.solver))?;
    let cost = pm_core::riccati::cost(&peak_sets);
    let period = schedule::cycle_period(&sched, &s.graph);
    out.write_json("schedule.json", &sched)?;
    out.write("events.csv", &export::events_csv(&schedule::event_list(&sched, &s.graph)))?;
    out.write("trajectory.csv", &export::trajectory_csv(&s, &trajectories))?;
    let views: Vec<Value> = timelines
        .iter()
        .map(|tl| json!({ "target": tl.target, "t_on": tl.t_on, "t_off": tl.t_off, "visit_start": tl.visit_start }))
        .collect();
    out.write_json("peaks.json", &json!({ "period": period, "cost": cost, "timelines": views, "peaks": peak_sets }))?;
    let files = out.finish()?;
    Ok(summary("schedule", &a.common.out, files, json!({ "period": period, "cost": cost })))
}

pub fn balance(a: &BalanceArgs) -> Result<Value> {
    let s = load(&a.config, &a.common)?;
    let mut settings = BalanceSettings::from(&s.solver);
    if let Some(kp) = a.kp {
        settings.kp = kp;
    }
    if let Some(tol) = a.tol {
        settings.tol = tol;
    }
    if let Some(n) = a.max_iters {
        settings.max_iters = n;
    }
    let tour: Tour = optimize::choose_tour(&s)?;
    let (f, trace) = balance::equalized_cost(&s, &tour, a.period, None, &settings)?;
    let mut out = open(&a.common.out, "balance", a, Some(&s))?;
    out.write_json("balance.json", &json!({ "tour": tour, "period": a.period, "f": f, "trace": trace }))?;
    out.write("balance.csv", &export::balance_trace_csv(&trace, &ids(&s)))?;
    let files = out.finish()?;
    let last = trace.last();
    Ok(summary(
        "balance",
        &a.common.out,
        files,
        json!({ "status": trace.status, "iterations": trace.iterations(), "f": f, "relative_spread": last.relative_spread() }),
    ))
}

fn pipeline_outputs(out: &mut OutDir, s: &Scenario, r: &PipelineResult) -> Result<()> {
    out.write_json("schedule.json", &r.schedule)?;
    out.write("events.csv", &export::events_csv(&schedule::event_list(&r.schedule, &s.graph)))?;
    out.write("probe_curve.csv", &export::probe_curve_csv(&r.report.search))?;
    out.write("balance.csv", &export::balance_trace_csv(&r.report.trace, &ids(s)))?;
    out.write("trajectory.csv", &export::trajectory_csv(s, &r.trajectories))?;
    Ok(())
}

fn report_json(r: &PipelineResult) -> Value {
    json!({ "report": r.report, "schedule": r.schedule, "limit_cycle_cost": r.cost, "peak_sets": r.peak_sets })
}

fn headline(r: &PipelineResult) -> Value {
    json!({
        "tour": r.report.tour.order,
        "t_star": r.report.t_star,
        "cost": r.cost,
        "equal_peaks": r.report.equal_peaks,
        "relative_spread": r.report.relative_spread,
    })
}

pub fn optimize(a: &OptimizeArgs) -> Result<Value> {
    let s = load(&a.config, &a.common)?;
    let mut opts = OptimizeOptions::from(&s.solver);
    if let Some(e) = a.eps {
        opts.eps_scale = e;
    }
    if let Some(v) = a.tmin_scale {
        opts.tmin_scale = v;
    }
    if let Some(v) = a.tmax_scale {
        opts.tmax_scale = v;
    }
    let r = optimize::run_pipeline(&s, &opts)?;
    let mut out = open(&a.common.out, "optimize", a, Some(&s))?;
    out.write_json("report.json", &report_json(&r))?;
    pipeline_outputs(&mut out, &s, &r)?;
    let files = out.finish()?;
    Ok(summary("optimize", &a.common.out, files, headline(&r)))
}

pub fn simulate(a: &SimulateArgs) -> Result<Value> {
    let s = load(&a.config, &a.common)?;
    let Loaded { value: sched, warnings } = config::load_schedule(&a.schedule, !a.common.lenient)?;
    warn_all(&warnings);
    let cfg = SimConfig { seed: a.seed, cycles: a.cycles, dt: a.dt, stride: a.stride, ..SimConfig::default() };
    let trace = simkf::simulate(&s, &sched, &cfg)?;
    let mut out = open(&a.common.out, "simulate", a, Some(&s))?;
    out.write("sim_trace.csv", &export::sim_trace_csv(&trace))?;
    let files = out.finish()?;
    Ok(summary("simulate", &a.common.out, files, json!({ "period": trace.period, "cycles": trace.cycles })))
}

/// Target positions in tour order, closing back to the first.
fn positions_csv(s: &Scenario, tour: &Tour) -> String {
    let mut out = String::from("visit,target_id,label,x,y\n");
    let mut order = tour.order.clone();
    order.extend(tour.order.first().copied());
    for (k, id) in order.iter().enumerate() {
        let t = &s.targets[id - 1];
        let [x, y] = t.position.unwrap_or([f64::NAN, f64::NAN]);
        out.push_str(&format!("{k},{id},{},{},{}\n", t.label, export::fmt_f64(x), export::fmt_f64(y)));
    }
    out
}

pub fn reproduce(a: &ReproduceArgs) -> Result<Value> {
    let s = presets::table_one(a.seed);
    let r = optimize::run_pipeline(&s, &OptimizeOptions::from(&s.solver))?;
    let ids = ids(&s);
    let mut out = open(&a.out, "reproduce-paper", a, Some(&s))?;
    out.write("scenario.json", &(config::emit_scenario(&s) + "\n"))?;
    out.write("fig2_covariance.csv", &export::trajectory_csv(&s, &r.trajectories))?;
    out.write("fig3a_probe_curve.csv", &export::probe_curve_csv(&r.report.search))?;
    out.write("fig3b_peaks.csv", &export::peaks_csv(&r.report.trace, &ids))?;
    out.write("fig3c_dwell.csv", &export::dwell_csv(&r.report.trace, &ids))?;
    out.write("fig4_positions.csv", &positions_csv(&s, &r.report.tour))?;
    let mut report = report_json(&r);
    report["seed"] = json!(a.seed);
    out.write_json("report.json", &report)?;
    let files = out.finish()?;
    Ok(summary("reproduce-paper", &a.out, files, headline(&r)))
}
