//! Travel-time graph and single-visit tours.
//!
//! Node `k` (0-based) carries target id `k + 1`. Graphs given with missing
//! edges are closed under shortest paths, so `d` is always a complete metric
//! and a tour leg may stand for a multi-hop route (see [`MonitoringGraph::route`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::Mat;

/// Largest graph handed to the exact solver (`2^M * M` table).
pub const EXACT_TSP_CAP: usize = 13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("travel-time matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("travel times are not symmetric: d[{0}][{1}] != d[{1}][{0}]")]
    Asymmetric(usize, usize),
    #[error("travel time d[{0}][{0}] must be zero")]
    NonzeroDiagonal(usize),
    #[error("travel time d[{0}][{1}] is negative or not finite")]
    BadEntry(usize, usize),
    #[error("graph is disconnected: no route between nodes {0} and {1}")]
    Disconnected(usize, usize),
    #[error("position {0} has non-finite coordinates")]
    BadPosition(usize),
    #[error("exact tour search supports at most {EXACT_TSP_CAP} nodes, got {0}")]
    TooLarge(usize),
    #[error("graph has no nodes")]
    Empty,
}

/// How a graph was specified; kept so it can be written back verbatim.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    Positions(Vec<[f64; 2]>),
    TravelTimes(Vec<Vec<Option<f64>>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitoringGraph {
    d: Mat,
    /// `next[i][j]`: first hop on a shortest route from `i` to `j`.
    next: Vec<Vec<usize>>,
    source: GraphSource,
}

impl MonitoringGraph {
    /// Complete graph with Euclidean edge lengths.
    pub fn euclidean(positions: &[[f64; 2]]) -> Result<Self, GraphError> {
        if let Some(k) = positions.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(GraphError::BadPosition(k));
        }
        let n = positions.len();
        let d = Mat::from_fn(n, n, |i, j| {
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            dx.hypot(dy)
        });
        let next = (0..n).map(|_| (0..n).collect()).collect();
        Ok(Self { d, next, source: GraphSource::Positions(positions.to_vec()) })
    }

    /// Graph from explicit travel times; `None` marks a missing edge.
    /// Missing edges are filled by shortest paths.
    pub fn from_travel_times(rows: &[Vec<Option<f64>>]) -> Result<Self, GraphError> {
        let n = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(GraphError::NotSquare(n, r.len()));
        }
        for i in 0..n {
            match rows[i][i] {
                Some(0.0) | None => {}
                Some(_) => return Err(GraphError::NonzeroDiagonal(i)),
            }
            for j in 0..n {
                if let Some(x) = rows[i][j] {
                    if !(x.is_finite() && x >= 0.0) {
                        return Err(GraphError::BadEntry(i, j));
                    }
                }
                if j > i && rows[i][j] != rows[j][i] {
                    return Err(GraphError::Asymmetric(i, j));
                }
            }
        }
        let mut d = Mat::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                rows[i][j].unwrap_or(f64::INFINITY)
            }
        });
        let mut next: Vec<Vec<usize>> = (0..n).map(|_| (0..n).collect()).collect();
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[(i, k)] + d[(k, j)];
                    if via < d[(i, j)] {
                        d[(i, j)] = via;
                        next[i][j] = next[i][k];
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if !d[(i, j)].is_finite() {
                    return Err(GraphError::Disconnected(i, j));
                }
            }
        }
        Ok(Self { d, next, source: GraphSource::TravelTimes(rows.to_vec()) })
    }

    pub fn source(&self) -> &GraphSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Travel time between 0-based nodes.
    pub fn travel(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

    /// Travel time between target ids.
    pub fn travel_ids(&self, a: usize, b: usize) -> f64 {
        self.d[(a - 1, b - 1)]
    }

    pub fn matrix(&self) -> &Mat {
        &self.d
    }

    /// Node sequence (0-based, both ends included) realizing `travel(i, j)`.
    pub fn route(&self, i: usize, j: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while cur != j {
            cur = self.next[cur][j];
            path.push(cur);
        }
        path
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        for i in 0..n {
            if self.d[(i, i)] != 0.0 {
                return Err(GraphError::NonzeroDiagonal(i));
            }
            for j in 0..n {
                let x = self.d[(i, j)];
                if !x.is_finite() || x < 0.0 {
                    return Err(GraphError::BadEntry(i, j));
                }
                if x != self.d[(j, i)] {
                    return Err(GraphError::Asymmetric(i, j));
                }
            }
        }
        Ok(())
    }

    /// Row-major travel-time rows.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        crate::linalg::to_rows(&self.d)
    }

    /// Total travel time of a cyclic sequence of target ids.
    pub fn cycle_travel(&self, ids: &[usize]) -> f64 {
        let n = ids.len();
        (0..n).map(|k| self.travel_ids(ids[k], ids[(k + 1) % n])).sum()
    }
}

/// `n` points drawn uniformly from `[0, side]^2`.
pub fn uniform_positions(n: usize, side: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side]).collect()
}

/// Single-visit cycle over all targets, ids starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tour {
    pub order: Vec<usize>,
    pub travel_time: f64,
}

impl Tour {
    /// Builds a tour from any rotation/orientation of a cycle of ids and
    /// puts it in canonical form: smallest id first, lexicographically
    /// smaller orientation.
    pub fn canonical(g: &MonitoringGraph, order: &[usize]) -> Self {
        let mut o = order.to_vec();
        if let Some(pos) = o.iter().enumerate().min_by_key(|(_, &v)| v).map(|(k, _)| k) {
            o.rotate_left(pos);
        }
        if o.len() > 2 && o[o.len() - 1] < o[1] {
            o[1..].reverse();
        }
        let travel_time = g.cycle_travel(&o);
        Self { order: o, travel_time }
    }
}

/// Exact minimum-travel tour by Held–Karp dynamic programming. Ties are
/// broken towards the lexicographically smallest canonical order.
pub fn solve_tsp_exact(g: &MonitoringGraph) -> Result<Tour, GraphError> {
    let n = g.len();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    if n > EXACT_TSP_CAP {
        return Err(GraphError::TooLarge(n));
    }
    if n <= 3 {
        let order: Vec<usize> = (1..=n).collect();
        return Ok(Tour::canonical(g, &order));
    }
    // Node 0 is the fixed start. Bits index nodes 1..n.
    let m = n - 1;
    let full = (1usize << m) - 1;
    let mut dp = vec![f64::INFINITY; (1 << m) * m];
    let idx = |mask: usize, j: usize| mask * m + j;
    for j in 0..m {
        dp[idx(1 << j, j)] = g.travel(0, j + 1);
    }
    for mask in 1..=full {
        for j in 0..m {
            if mask & (1 << j) == 0 {
                continue;
            }
            let cur = dp[idx(mask, j)];
            if !cur.is_finite() {
                continue;
            }
            for k in 0..m {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let nm = mask | (1 << k);
                let cand = cur + g.travel(j + 1, k + 1);
                if cand < dp[idx(nm, k)] {
                    dp[idx(nm, k)] = cand;
                }
            }
        }
    }
    let best = (0..m)
        .map(|j| dp[idx(full, j)] + g.travel(j + 1, 0))
        .fold(f64::INFINITY, f64::min);
    let slack = 1e-9 * (1.0 + best);

    // Greedy lexicographic reconstruction. dp[R][j] is the cheapest path
    // 0 -> R -> j; by symmetry it also prices j -> R\{j} -> 0.
    let mut order = vec![1usize];
    let mut remaining = full;
    let mut cur = 0usize;
    let mut prefix = 0.0;
    while remaining != 0 {
        let mut chosen = None;
        for j in 0..m {
            if remaining & (1 << j) == 0 {
                continue;
            }
            let total = prefix + g.travel(cur, j + 1) + dp[idx(remaining, j)];
            if total <= best + slack {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("held-karp reconstruction lost the optimum");
        prefix += g.travel(cur, j + 1);
        remaining &= !(1 << j);
        cur = j + 1;
        order.push(j + 2);
    }
    Ok(Tour::canonical(g, &order))
}

/// Nearest-neighbour construction from node 1 followed by first-improvement
/// 2-opt.
pub fn solve_tsp_heuristic(g: &MonitoringGraph) -> Result<Tour, GraphError> {
    let n = g.len();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    let mut order = nearest_neighbor(g);
    two_opt(g, &mut order);
    let ids: Vec<usize> = order.iter().map(|k| k + 1).collect();
    Ok(Tour::canonical(g, &ids))
}

pub(crate) fn nearest_neighbor(g: &MonitoringGraph) -> Vec<usize> {
    let n = g.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = 0;
    visited[0] = true;
    order.push(0);
    for _ in 1..n {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if visited[j] {
                continue;
            }
            let dist = g.travel(cur, j);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        let (j, _) = best.expect("unvisited node exists");
        visited[j] = true;
        order.push(j);
        cur = j;
    }
    order
}

fn two_opt(g: &MonitoringGraph, order: &mut [usize]) {
    let n = order.len();
    if n < 4 {
        return;
    }
    'restart: loop {
        for i in 0..n - 1 {
            for k in i + 2..n {
                let a = order[i];
                let b = order[i + 1];
                let c = order[k];
                let d = order[(k + 1) % n];
                if d == a {
                    continue;
                }
                let delta = g.travel(a, c) + g.travel(b, d) - g.travel(a, b) - g.travel(c, d);
                if delta < -1e-12 * (1.0 + g.travel(a, b) + g.travel(c, d)) {
                    order[i + 1..=k].reverse();
                    continue 'restart;
                }
            }
        }
        break;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive scan over all orders starting at id 1.
    fn brute_force(g: &MonitoringGraph) -> f64 {
        fn rec(g: &MonitoringGraph, order: &mut Vec<usize>, left: &mut Vec<usize>, best: &mut f64) {
            if left.is_empty() {
                *best = best.min(g.cycle_travel(order));
                return;
            }
            for k in 0..left.len() {
                let v = left.remove(k);
                order.push(v);
                rec(g, order, left, best);
                order.pop();
                left.insert(k, v);
            }
        }
        let mut best = f64::INFINITY;
        let mut left: Vec<usize> = (2..=g.len()).collect();
        rec(g, &mut vec![1], &mut left, &mut best);
        best
    }

    fn square() -> MonitoringGraph {
        MonitoringGraph::euclidean(&[[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn euclidean_three_four_five() {
        let g = MonitoringGraph::euclidean(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(g.travel(0, 1), 5.0);
        assert_eq!(g.travel(1, 0), 5.0);
        let single = MonitoringGraph::euclidean(&[[2.0, 2.0]]).unwrap();
        assert_eq!(single.matrix(), &Mat::zeros(1, 1));
    }

    #[test]
    fn uniform_points_bounded() {
        let g = MonitoringGraph::euclidean(&uniform_positions(5, 0.5, 7)).unwrap();
        g.validate().unwrap();
        assert!(g.matrix().max() <= 0.5 * 2f64.sqrt());
    }

    #[test]
    fn three_nodes_any_order() {
        let g = MonitoringGraph::euclidean(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]).unwrap();
        let t = solve_tsp_exact(&g).unwrap();
        let expect = g.travel(0, 1) + g.travel(1, 2) + g.travel(2, 0);
        assert!((t.travel_time - expect).abs() < 1e-12);
        assert_eq!(t.order, vec![1, 2, 3]);
    }

    #[test]
    fn square_perimeter() {
        let g = square();
        let t = solve_tsp_exact(&g).unwrap();
        assert!((t.travel_time - 4.0).abs() < 1e-12);
        // corners 1=(0,0), 3=(1,0), 2=(1,1), 4=(0,1)
        assert_eq!(t.order, vec![1, 3, 2, 4]);
        assert_eq!(solve_tsp_heuristic(&g).unwrap(), t);
    }

    #[test]
    fn exact_matches_brute_force_seeded() {
        for seed in 0..10 {
            let g = MonitoringGraph::euclidean(&uniform_positions(5 + (seed as usize % 3), 1.0, seed))
                .unwrap();
            let t = solve_tsp_exact(&g).unwrap();
            assert!((t.travel_time - brute_force(&g)).abs() < 1e-12);
            let mut sorted = t.order.clone();
            sorted.sort();
            assert_eq!(sorted, (1..=g.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn heuristic_close_to_exact_at_twelve() {
        let g = MonitoringGraph::euclidean(&uniform_positions(12, 1.0, 12)).unwrap();
        let exact = solve_tsp_exact(&g).unwrap();
        let heur = solve_tsp_heuristic(&g).unwrap();
        assert!(heur.travel_time >= exact.travel_time - 1e-12);
        assert!(heur.travel_time <= 1.2 * exact.travel_time);
    }

    #[test]
    fn heuristic_never_worse_than_nearest_neighbor() {
        for seed in 0..20 {
            let g = MonitoringGraph::euclidean(&uniform_positions(9, 1.0, 100 + seed)).unwrap();
            let nn: Vec<usize> = nearest_neighbor(&g).iter().map(|k| k + 1).collect();
            let h = solve_tsp_heuristic(&g).unwrap();
            assert!(h.travel_time <= g.cycle_travel(&nn) + 1e-12);
            assert_eq!(h, solve_tsp_heuristic(&g).unwrap());
        }
    }

    #[test]
    fn too_large_rejected() {
        let g = MonitoringGraph::euclidean(&uniform_positions(14, 1.0, 1)).unwrap();
        assert_eq!(solve_tsp_exact(&g), Err(GraphError::TooLarge(14)));
    }

    #[test]
    fn metric_closure_and_routes() {
        // path graph 1 - 2 - 3
        let rows = vec![
            vec![Some(0.0), Some(1.0), None],
            vec![Some(1.0), Some(0.0), Some(2.0)],
            vec![None, Some(2.0), Some(0.0)],
        ];
        let g = MonitoringGraph::from_travel_times(&rows).unwrap();
        assert_eq!(g.travel(0, 2), 3.0);
        assert_eq!(g.route(0, 2), vec![0, 1, 2]);
        assert_eq!(g.route(2, 2), vec![2]);
        let t = solve_tsp_exact(&g).unwrap();
        assert_eq!(t.travel_time, 6.0);
    }

    #[test]
    fn malformed_travel_times() {
        let asym = vec![vec![Some(0.0), Some(1.0)], vec![Some(2.0), Some(0.0)]];
        assert_eq!(MonitoringGraph::from_travel_times(&asym), Err(GraphError::Asymmetric(0, 1)));
        let diag = vec![vec![Some(1.0)]];
        assert_eq!(MonitoringGraph::from_travel_times(&diag), Err(GraphError::NonzeroDiagonal(0)));
        let split = vec![vec![Some(0.0), None], vec![None, Some(0.0)]];
        assert!(matches!(
            MonitoringGraph::from_travel_times(&split),
            Err(GraphError::Disconnected(_, _))
        ));
        let neg = vec![vec![Some(0.0), Some(-1.0)], vec![Some(-1.0), Some(0.0)]];
        assert_eq!(MonitoringGraph::from_travel_times(&neg), Err(GraphError::BadEntry(0, 1)));
    }

    proptest! {
        #[test]
        fn tour_invariants(seed in 0u64..500, n in 4usize..8, c in 0.1f64..10.0) {
            let pts = uniform_positions(n, 1.0, seed);
            let g = MonitoringGraph::euclidean(&pts).unwrap();
            let exact = solve_tsp_exact(&g).unwrap();
            let heur = solve_tsp_heuristic(&g).unwrap();
            prop_assert!(heur.travel_time >= exact.travel_time - 1e-12);

            // rotation and reversal leave the travel time unchanged
            let mut rot = exact.order.clone();
            rot.rotate_left(seed as usize % n);
            let mut rev = rot.clone();
            rev.reverse();
            prop_assert!((g.cycle_travel(&rot) - exact.travel_time).abs() < 1e-12);
            prop_assert!((g.cycle_travel(&rev) - exact.travel_time).abs() < 1e-12);

            // scaling all travel times
            let scaled: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * c, p[1] * c]).collect();
            let gs = MonitoringGraph::euclidean(&scaled).unwrap();
            let es = solve_tsp_exact(&gs).unwrap();
            prop_assert!((es.travel_time - c * exact.travel_time).abs() < 1e-9 * es.travel_time);
            prop_assert!((g.cycle_travel(&es.order) - exact.travel_time).abs() < 1e-9);
        }
    }
}
