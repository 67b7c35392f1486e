//! Target models, weighting functions and scenario validation.
//!
//! A target evolves as `dphi = A phi dt + B u dt + dw` and, while the agent
//! dwells at its node, is observed through `z = H phi + v`. Covariance
//! computations only need `A`, `Q` and `G = H' R^-1 H`; the control matrix
//! `B` is carried for the simulator and otherwise ignored.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, MonitoringGraph};
use crate::linalg::{self, Mat};

/// Real part above which an eigenvalue counts as not strictly stable.
pub const UNSTABLE_EIG_TOL: f64 = -1e-9;
/// Relative singular-value threshold for the PBH rank test.
pub const PBH_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Identity,
    LinearScale,
    Power,
}

/// Strictly increasing weighting `g` with `g(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightFn {
    pub kind: WeightKind,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "one")]
    pub exponent: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for WeightFn {
    fn default() -> Self {
        Self::identity()
    }
}

impl WeightFn {
    pub fn identity() -> Self {
        Self { kind: WeightKind::Identity, scale: 1.0, exponent: 1.0 }
    }

    pub fn linear(scale: f64) -> Self {
        Self { kind: WeightKind::LinearScale, scale, exponent: 1.0 }
    }

    pub fn power(scale: f64, exponent: f64) -> Self {
        Self { kind: WeightKind::Power, scale, exponent }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self.kind {
            WeightKind::Identity => x,
            WeightKind::LinearScale => self.scale * x,
            WeightKind::Power => self.scale * x.powf(self.exponent),
        }
    }

    pub fn is_valid(&self) -> bool {
        match self.kind {
            WeightKind::Identity => true,
            WeightKind::LinearScale => self.scale > 0.0 && self.scale.is_finite(),
            WeightKind::Power => {
                self.scale > 0.0
                    && self.scale.is_finite()
                    && self.exponent > 0.0
                    && self.exponent.is_finite()
            }
        }
    }
}

/// Matrix norm applied to covariances before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovNorm {
    #[default]
    Trace,
    Spectral,
}

impl CovNorm {
    /// Norm of a symmetric positive semi-definite matrix.
    pub fn eval(&self, m: &Mat) -> f64 {
        match self {
            CovNorm::Trace => m.trace(),
            CovNorm::Spectral => linalg::max_sym_eigenvalue(m).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub id: usize,
    pub label: String,
    pub position: Option<[f64; 2]>,
    pub a: Mat,
    pub h: Mat,
    pub q: Mat,
    pub r: Mat,
    /// Control input matrix; never enters the covariance dynamics.
    pub b: Option<Mat>,
    pub weight: WeightFn,
}

impl TargetModel {
    /// Scalar target with `H = 1`.
    pub fn scalar(id: usize, a: f64, q: f64, r: f64) -> Self {
        Self {
            id,
            label: format!("target-{id}"),
            position: None,
            a: linalg::scalar(a),
            h: linalg::scalar(1.0),
            q: linalg::scalar(q),
            r: linalg::scalar(r),
            b: None,
            weight: WeightFn::identity(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Information rate `G = H' R^-1 H`.
    pub fn info_matrix(&self) -> Mat {
        let r_inv = self
            .r
            .clone()
            .try_inverse()
            .unwrap_or_else(|| Mat::zeros(self.obs_dim(), self.obs_dim()));
        linalg::symmetrize(&(self.h.transpose() * r_inv * &self.h))
    }

    /// Kalman gain factor `H' R^-1` (multiply on the left by the covariance).
    pub fn gain_factor(&self) -> Mat {
        let r_inv = self
            .r
            .clone()
            .try_inverse()
            .unwrap_or_else(|| Mat::zeros(self.obs_dim(), self.obs_dim()));
        self.h.transpose() * r_inv
    }

    /// Largest `|Re(lambda)|` over eigenvalues of `A`, floored to avoid a
    /// zero characteristic rate.
    pub fn max_growth_rate(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re.abs())
            .fold(0.0_f64, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelViolation {
    #[error("target {id}: dimension mismatch: {detail}")]
    DimensionMismatch { id: usize, detail: String },
    #[error("target {id}: detectability assumption violated: an unstable mode of A is unobservable through H")]
    NotDetectable { id: usize },
    #[error("target {id}: instability assumption violated: drift matrix A is strictly stable")]
    StableDrift { id: usize },
    #[error("target {id}: instability assumption violated: process noise Q is not symmetric positive definite")]
    QNotPositiveDefinite { id: usize },
    #[error("target {id}: measurement noise R is not symmetric positive definite")]
    RNotPositiveDefinite { id: usize },
    #[error("target {id}: weighting function must be strictly increasing (positive scale and exponent)")]
    InvalidWeight { id: usize },
    #[error("target {id}: non-finite matrix entry")]
    NonFinite { id: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("scenario has no targets")]
    Empty,
    #[error("target id mismatch: {0}")]
    IdMismatch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Target(#[from] ModelViolation),
}

/// Every violation found while validating, in discovery order.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationErrors<E>(pub Vec<E>);

impl<E: fmt::Display> fmt::Display for ValidationErrors<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, e) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

fn dims_error(m: &TargetModel) -> Option<String> {
    let l = m.a.nrows();
    let p = m.h.nrows();
    if l == 0 || !m.a.is_square() {
        return Some(format!("A must be square and nonempty, got {}x{}", m.a.nrows(), m.a.ncols()));
    }
    if p == 0 || m.h.ncols() != l {
        return Some(format!("H must be m x {l}, got {}x{}", m.h.nrows(), m.h.ncols()));
    }
    if m.q.shape() != (l, l) {
        return Some(format!("Q must be {l}x{l}, got {}x{}", m.q.nrows(), m.q.ncols()));
    }
    if m.r.shape() != (p, p) {
        return Some(format!("R must be {p}x{p}, got {}x{}", m.r.nrows(), m.r.ncols()));
    }
    if let Some(b) = &m.b {
        if b.nrows() != l {
            return Some(format!("B must have {l} rows, got {}", b.nrows()));
        }
    }
    None
}

/// PBH detectability test: every eigenvalue of `A` with
/// `Re >= UNSTABLE_EIG_TOL` must leave `[A - lambda I; H]` with full column
/// rank.
pub fn detectability_check(a: &Mat, h: &Mat) -> Result<bool, ModelViolation> {
    let l = a.nrows();
    if !a.is_square() || h.ncols() != l {
        return Err(ModelViolation::DimensionMismatch {
            id: 0,
            detail: format!("A is {}x{}, H is {}x{}", a.nrows(), a.ncols(), h.nrows(), h.ncols()),
        });
    }
    let p = h.nrows();
    for lambda in a.complex_eigenvalues().iter() {
        if lambda.re < UNSTABLE_EIG_TOL {
            continue;
        }
        let stacked = DMatrix::<Complex<f64>>::from_fn(l + p, l, |i, j| {
            if i < l {
                let diag = if i == j { *lambda } else { Complex::new(0.0, 0.0) };
                Complex::new(a[(i, j)], 0.0) - diag
            } else {
                Complex::new(h[(i - l, j)], 0.0)
            }
        });
        if linalg::complex_rank(&stacked, PBH_RANK_TOL) < l {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn validate_target(m: TargetModel) -> Result<TargetModel, ValidationErrors<ModelViolation>> {
    let id = m.id;
    if let Some(detail) = dims_error(&m) {
        return Err(ValidationErrors(vec![ModelViolation::DimensionMismatch { id, detail }]));
    }
    let finite = [&m.a, &m.h, &m.q, &m.r].iter().all(|x| x.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(ValidationErrors(vec![ModelViolation::NonFinite { id }]));
    }
    let mut errs = Vec::new();
    match detectability_check(&m.a, &m.h) {
        Ok(true) => {}
        Ok(false) => errs.push(ModelViolation::NotDetectable { id }),
        Err(e) => errs.push(e),
    }
    let unstable = m.a.complex_eigenvalues().iter().any(|l| l.re >= UNSTABLE_EIG_TOL);
    if !unstable {
        errs.push(ModelViolation::StableDrift { id });
    }
    if !linalg::is_spd(&m.q) {
        errs.push(ModelViolation::QNotPositiveDefinite { id });
    }
    if !linalg::is_spd(&m.r) {
        errs.push(ModelViolation::RNotPositiveDefinite { id });
    }
    if !m.weight.is_valid() {
        errs.push(ModelViolation::InvalidWeight { id });
    }
    if errs.is_empty() {
        Ok(m)
    } else {
        Err(ValidationErrors(errs))
    }
}

/// Numerical knobs for the solvers; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Consensus gain of the dwell-time update.
    pub kp: f64,
    /// Relative peak spread at which balancing stops.
    pub balance_tol: f64,
    pub max_balance_iters: usize,
    /// Golden-section tolerance as a fraction of the tour travel time.
    pub eps_scale: f64,
    pub tmin_scale: f64,
    pub tmax_scale: f64,
    /// Relative one-period-map defect at which the limit cycle is accepted.
    pub cycle_tol: f64,
    pub max_cycles: usize,
    pub samples_per_segment: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kp: 1e-2,
            balance_tol: 1e-6,
            max_balance_iters: 20_000,
            eps_scale: 1e-3,
            tmin_scale: 0.1,
            tmax_scale: 3.0,
            cycle_tol: 1e-9,
            max_cycles: 10_000,
            samples_per_segment: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub targets: Vec<TargetModel>,
    pub graph: MonitoringGraph,
    pub norm: CovNorm,
    pub solver: SolverSettings,
}

impl Scenario {
    pub fn new(targets: Vec<TargetModel>, graph: MonitoringGraph) -> Self {
        Self { targets, graph, norm: CovNorm::Trace, solver: SolverSettings::default() }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Weighted norm `g_i(||X||)` for target at index `idx`.
    pub fn weighted(&self, idx: usize, cov: &Mat) -> f64 {
        self.targets[idx].weight.eval(self.norm.eval(cov))
    }

    /// Index of the target with the given id.
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.targets.iter().position(|t| t.id == id)
    }
}

/// Target ids must be exactly `1..=M` with a graph of `M` nodes; node `k`
/// of the graph belongs to target id `k + 1`.
pub fn validate_scenario(s: Scenario) -> Result<Scenario, ValidationErrors<ScenarioError>> {
    if s.targets.is_empty() {
        return Err(ValidationErrors(vec![ScenarioError::Empty]));
    }
    let mut errs = Vec::new();
    let mut seen = BTreeSet::new();
    for t in &s.targets {
        if !seen.insert(t.id) {
            errs.push(ScenarioError::IdMismatch(format!("duplicate target id {}", t.id)));
        }
    }
    let m = s.targets.len();
    if errs.is_empty() && (seen.first() != Some(&1) || seen.last() != Some(&m)) {
        errs.push(ScenarioError::IdMismatch(format!("target ids must be exactly 1..={m}")));
    }
    if s.graph.len() != m {
        errs.push(ScenarioError::IdMismatch(format!(
            "graph has {} nodes but scenario has {m} targets",
            s.graph.len()
        )));
    }
    if let Err(e) = s.graph.validate() {
        errs.push(e.into());
    }
    for t in &s.targets {
        if let Err(ValidationErrors(v)) = validate_target(t.clone()) {
            errs.extend(v.into_iter().map(ScenarioError::from));
        }
    }
    if errs.is_empty() {
        let mut s = s;
        s.targets.sort_by_key(|t| t.id);
        Ok(s)
    } else {
        Err(ValidationErrors(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MonitoringGraph;
    use proptest::prelude::*;

    fn m2(vals: &[f64]) -> Mat {
        Mat::from_row_slice(2, 2, vals)
    }

    #[test]
    fn table_one_target_is_valid() {
        let t = TargetModel::scalar(1, 0.3487, 1.1924, 2.3140);
        assert!(validate_target(t).is_ok());
    }

    #[test]
    fn stable_scalar_rejected() {
        let err = validate_target(TargetModel::scalar(1, -1.0, 1.0, 1.0)).unwrap_err();
        assert_eq!(err.0, vec![ModelViolation::StableDrift { id: 1 }]);
        assert!(err.to_string().contains("instability assumption"));
    }

    #[test]
    fn undetectable_pair_rejected() {
        let mut t = TargetModel::scalar(3, 0.0, 1.0, 1.0);
        t.a = m2(&[0.3, 0.0, 0.0, 0.2]);
        t.h = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        t.q = Mat::identity(2, 2);
        let err = validate_target(t).unwrap_err();
        assert_eq!(err.0, vec![ModelViolation::NotDetectable { id: 3 }]);
    }

    #[test]
    fn pbh_oracle_examples() {
        assert!(detectability_check(&linalg::scalar(0.3487), &linalg::scalar(1.0)).unwrap());
        let a = m2(&[1.0, 0.0, 0.0, 2.0]);
        let h = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(!detectability_check(&a, &h).unwrap());
        // full observation always detectable
        let a = m2(&[1.0, 5.0, -3.0, 2.0]);
        assert!(detectability_check(&a, &Mat::identity(2, 2)).unwrap());
        // coupled unstable modes seen through one channel
        let a = m2(&[1.0, 1.0, 0.0, 2.0]);
        assert!(detectability_check(&a, &Mat::from_row_slice(1, 2, &[1.0, 0.0])).unwrap());
        assert!(detectability_check(&a, &Mat::from_row_slice(1, 3, &[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn stable_unobservable_mode_is_still_detectable() {
        let a = m2(&[0.5, 0.0, 0.0, -1.0]);
        let h = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(detectability_check(&a, &h).unwrap());
    }

    #[test]
    fn multiple_violations_reported_together() {
        let t = TargetModel::scalar(2, -0.5, -1.0, 0.0);
        let err = validate_target(t).unwrap_err();
        assert_eq!(
            err.0,
            vec![
                ModelViolation::StableDrift { id: 2 },
                ModelViolation::QNotPositiveDefinite { id: 2 },
                ModelViolation::RNotPositiveDefinite { id: 2 },
            ]
        );
    }

    #[test]
    fn dimension_mismatch() {
        let mut t = TargetModel::scalar(1, 0.5, 1.0, 1.0);
        t.q = Mat::identity(2, 2);
        assert!(matches!(
            validate_target(t).unwrap_err().0[0],
            ModelViolation::DimensionMismatch { .. }
        ));
    }

    #[test]
    fn marginal_drift_counts_as_unstable() {
        assert!(validate_target(TargetModel::scalar(1, 0.0, 1.0, 1.0)).is_ok());
        assert!(validate_target(TargetModel::scalar(1, -1e-10, 1.0, 1.0)).is_ok());
    }

    #[test]
    fn scenario_checks() {
        let g = MonitoringGraph::euclidean(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let ok = Scenario::new(
            vec![TargetModel::scalar(2, 0.2, 1.0, 1.0), TargetModel::scalar(1, 0.3, 1.0, 1.0)],
            g.clone(),
        );
        let v = validate_scenario(ok).unwrap();
        assert_eq!(v.targets[0].id, 1);

        let empty = Scenario::new(vec![], MonitoringGraph::euclidean(&[]).unwrap());
        assert_eq!(validate_scenario(empty).unwrap_err().0, vec![ScenarioError::Empty]);

        let dup = Scenario::new(
            vec![TargetModel::scalar(1, 0.2, 1.0, 1.0), TargetModel::scalar(1, 0.3, 1.0, 1.0)],
            g,
        );
        assert!(matches!(validate_scenario(dup).unwrap_err().0[0], ScenarioError::IdMismatch(_)));
    }

    #[test]
    fn validation_is_idempotent() {
        let t = TargetModel::scalar(1, 0.3, 1.0, 2.0);
        let once = validate_target(t).unwrap();
        assert_eq!(validate_target(once.clone()).unwrap(), once);
        let bad = TargetModel::scalar(1, -0.3, 1.0, 2.0);
        assert_eq!(validate_target(bad.clone()), validate_target(bad));
    }

    proptest! {
        #[test]
        fn weights_strictly_increasing(
            kind in 0usize..3,
            scale in 0.01f64..100.0,
            exponent in 0.1f64..4.0,
            x in 0.0f64..50.0,
            dx in 1e-3f64..10.0,
        ) {
            let w = match kind {
                0 => WeightFn::identity(),
                1 => WeightFn::linear(scale),
                _ => WeightFn::power(scale, exponent),
            };
            prop_assert_eq!(w.eval(0.0), 0.0);
            prop_assert!(w.eval(x) < w.eval(x + dx));
        }

        #[test]
        fn detectability_invariant_under_similarity(
            a in proptest::collection::vec(-1.0f64..1.0, 4),
            h in proptest::collection::vec(-1.0f64..1.0, 2),
            t in proptest::collection::vec(-1.0f64..1.0, 4),
            zero_h in proptest::bool::ANY,
        ) {
            let a = m2(&a);
            let mut h = Mat::from_row_slice(1, 2, &h);
            if zero_h {
                h[(0, 1)] = 0.0;
            }
            let t = m2(&t) + Mat::identity(2, 2) * 2.5;
            let t_inv = t.clone().try_inverse().unwrap();
            let base = detectability_check(&a, &h).unwrap();
            let moved = detectability_check(&(&t * &a * &t_inv), &(&h * &t_inv)).unwrap();
            prop_assert_eq!(base, moved);
        }
    }
}
