//! Scenario and schedule files (JSON).
//!
//! Matrices are nested row arrays; a bare number stands for a 1x1 matrix and
//! a flat array for a single row. The graph is given either as node
//! `positions` (Euclidean travel times) or as a symmetric `travel_times`
//! matrix where `null` marks a missing edge.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphSource, MonitoringGraph};
use crate::linalg::{self, Mat};
use crate::models::{
    validate_scenario, CovNorm, Scenario, ScenarioError, SolverSettings, TargetModel,
    ValidationErrors, WeightFn,
};
use crate::schedule::AgentSchedule;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unknown keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("graph must give exactly one of `positions` or `travel_times`")]
    GraphSpec,
    #[error("target {id}: {detail}")]
    BadMatrix { id: usize, detail: String },
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        ConfigError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

/// Matrix as written in a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
    Row(Vec<f64>),
}

impl MatrixSpec {
    fn to_mat(&self) -> Option<Mat> {
        match self {
            MatrixSpec::Scalar(x) => Some(linalg::scalar(*x)),
            MatrixSpec::Rows(r) => linalg::from_rows(r),
            MatrixSpec::Row(r) => linalg::from_rows(std::slice::from_ref(r)),
        }
    }

    fn from_mat(m: &Mat) -> Self {
        if m.shape() == (1, 1) {
            MatrixSpec::Scalar(m[(0, 0)])
        } else {
            MatrixSpec::Rows(linalg::to_rows(m))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFile {
    pub id: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 2]>,
    #[serde(rename = "A")]
    pub a: MatrixSpec,
    #[serde(rename = "H")]
    pub h: MatrixSpec,
    #[serde(rename = "Q")]
    pub q: MatrixSpec,
    #[serde(rename = "R")]
    pub r: MatrixSpec,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixSpec>,
    #[serde(default)]
    pub weight: WeightFn,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub travel_times: Option<Vec<Vec<Option<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub targets: Vec<TargetFile>,
    pub graph: GraphFile,
    #[serde(default)]
    pub norm: CovNorm,
    #[serde(default)]
    pub solver: SolverSettings,
}

/// A parsed value plus the unknown keys skipped in lenient mode.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, strict: bool) -> Result<Loaded<T>, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let mut ignored = Vec::new();
    let value: T = serde_ignored::deserialize(&mut de, |path| ignored.push(path.to_string()))?;
    de.end()?;
    if strict && !ignored.is_empty() {
        return Err(ConfigError::UnknownKeys(ignored));
    }
    let warnings = ignored.into_iter().map(|k| format!("ignoring unknown key `{k}`")).collect();
    Ok(Loaded { value, warnings })
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })
}

impl ScenarioFile {
    /// Builds and validates the in-memory scenario.
    pub fn build(&self) -> crate::Result<Scenario> {
        let mut targets = Vec::with_capacity(self.targets.len());
        for t in &self.targets {
            let mat = |spec: &MatrixSpec, name: &str| {
                spec.to_mat().ok_or_else(|| ConfigError::BadMatrix {
                    id: t.id,
                    detail: format!("{name} has ragged or empty rows"),
                })
            };
            targets.push(TargetModel {
                id: t.id,
                label: t.label.clone(),
                position: t.position,
                a: mat(&t.a, "A")?,
                h: mat(&t.h, "H")?,
                q: mat(&t.q, "Q")?,
                r: mat(&t.r, "R")?,
                b: t.b.as_ref().map(|b| mat(b, "B")).transpose()?,
                weight: t.weight,
            });
        }
        let graph = match (&self.graph.positions, &self.graph.travel_times) {
            (Some(p), None) => MonitoringGraph::euclidean(p),
            (None, Some(d)) => MonitoringGraph::from_travel_times(d),
            _ => return Err(ConfigError::GraphSpec.into()),
        }
        .map_err(|e| ValidationErrors(vec![ScenarioError::Graph(e)]))?;
        if let Some(p) = &self.graph.positions {
            let mut sorted: Vec<&mut TargetModel> = targets.iter_mut().collect();
            sorted.sort_by_key(|t| t.id);
            for (t, pos) in sorted.into_iter().zip(p) {
                t.position.get_or_insert(*pos);
            }
        }
        let s = Scenario { targets, graph, norm: self.norm, solver: self.solver.clone() };
        Ok(validate_scenario(s)?)
    }

    /// File form of a scenario; `ScenarioFile::from(&s).build()` gives back `s`.
    pub fn from_scenario(s: &Scenario) -> Self {
        let graph = match s.graph.source() {
            GraphSource::Positions(p) => GraphFile { positions: Some(p.clone()), travel_times: None },
            GraphSource::TravelTimes(d) => GraphFile { positions: None, travel_times: Some(d.clone()) },
        };
        let targets = s
            .targets
            .iter()
            .map(|t| TargetFile {
                id: t.id,
                label: t.label.clone(),
                position: t.position,
                a: MatrixSpec::from_mat(&t.a),
                h: MatrixSpec::from_mat(&t.h),
                q: MatrixSpec::from_mat(&t.q),
                r: MatrixSpec::from_mat(&t.r),
                b: t.b.as_ref().map(MatrixSpec::from_mat),
                weight: t.weight,
            })
            .collect();
        Self { targets, graph, norm: s.norm, solver: s.solver.clone() }
    }
}

/// Parses and validates a scenario from JSON text.
pub fn parse_scenario(text: &str, strict: bool) -> crate::Result<Loaded<Scenario>> {
    let file: Loaded<ScenarioFile> = parse_json(text, strict)?;
    Ok(Loaded { value: file.value.build()?, warnings: file.warnings })
}

pub fn load_scenario(path: &Path, strict: bool) -> crate::Result<Loaded<Scenario>> {
    parse_scenario(&read(path)?, strict)
}

/// Pretty JSON for a scenario.
pub fn emit_scenario(s: &Scenario) -> String {
    serde_json::to_string_pretty(&ScenarioFile::from_scenario(s)).expect("scenario serializes")
}

/// Compact JSON with sorted keys; stable input for digests.
pub fn canonical_json(s: &Scenario) -> String {
    let v = serde_json::to_value(ScenarioFile::from_scenario(s)).expect("scenario serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn parse_schedule(text: &str, strict: bool) -> Result<Loaded<AgentSchedule>, ConfigError> {
    parse_json(text, strict)
}

pub fn load_schedule(path: &Path, strict: bool) -> Result<Loaded<AgentSchedule>, ConfigError> {
    parse_schedule(&read(path)?, strict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    const TWO: &str = r#"{
        "targets": [
            {"id": 2, "A": 0.2, "H": 1, "Q": 1, "R": 2},
            {"id": 1, "label": "a", "A": [[0.1, 1], [0, 0.3]], "H": [1, 0],
             "Q": [[1, 0], [0, 1]], "R": 1, "weight": {"kind": "linear-scale", "scale": 2}}
        ],
        "graph": {"positions": [[0, 0], [3, 4]]}
    }"#;

    #[test]
    fn parses_mixed_matrix_forms_and_sorts_targets() {
        let s = parse_scenario(TWO, true).unwrap().value;
        assert_eq!(s.targets[0].id, 1);
        assert_eq!(s.targets[0].a.shape(), (2, 2));
        assert_eq!(s.targets[0].h.shape(), (1, 2));
        assert_eq!(s.targets[0].position, Some([0.0, 0.0]));
        assert_eq!(s.graph.travel(0, 1), 5.0);
        assert_eq!(s.targets[0].weight, WeightFn::linear(2.0));
    }

    #[test]
    fn emit_then_load_is_identity() {
        let s = parse_scenario(TWO, true).unwrap().value;
        let back = parse_scenario(&emit_scenario(&s), true).unwrap().value;
        assert_eq!(s, back);
        assert_eq!(canonical_json(&s), canonical_json(&back));
    }

    #[test]
    fn unknown_key_strict_vs_lenient() {
        let text = TWO.replace("\"id\": 2,", "\"id\": 2, \"colour\": 3,");
        match parse_scenario(&text, true) {
            Err(Error::Config(ConfigError::UnknownKeys(k))) => assert!(k[0].contains("colour")),
            other => panic!("{other:?}"),
        }
        let loaded = parse_scenario(&text, false).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn syntax_error_reports_location() {
        match parse_scenario("{\n  \"targets\": [,]\n}", true) {
            Err(Error::Config(ConfigError::Parse { line, column, .. })) => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_edges_and_asymmetry() {
        let base = r#"{"targets": [{"id":1,"A":1,"H":1,"Q":1,"R":1},{"id":2,"A":1,"H":1,"Q":1,"R":1},
            {"id":3,"A":1,"H":1,"Q":1,"R":1}], "graph": {"travel_times": TT}}"#;
        let ok = base.replace("TT", "[[0,1,null],[1,0,2],[null,2,0]]");
        let s = parse_scenario(&ok, true).unwrap().value;
        assert_eq!(s.graph.travel(0, 2), 3.0);
        let bad = base.replace("TT", "[[0,1,4],[1,0,2],[5,2,0]]");
        let err = parse_scenario(&bad, true).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("symmetric"));
    }

    #[test]
    fn graph_needs_exactly_one_form() {
        let text = r#"{"targets": [{"id":1,"A":1,"H":1,"Q":1,"R":1}], "graph": {}}"#;
        assert!(matches!(parse_scenario(text, true), Err(Error::Config(ConfigError::GraphSpec))));
    }

    #[test]
    fn schedule_file() {
        let s = parse_schedule(r#"{"visits": [1, 2, 1], "dwell": [1, 0.5, 2]}"#, true).unwrap().value;
        assert_eq!(s.visits, vec![1, 2, 1]);
        assert!(parse_schedule(r#"{"visits": [1], "dwell": [1], "x": 0}"#, true).is_err());
    }
}
