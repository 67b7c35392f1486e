//! Built-in five-target benchmark: scalar targets with `H = 1`, identity
//! weighting and trace norm, placed uniformly at random in `[0, 0.5]^2`.

use crate::graph::{uniform_positions, MonitoringGraph};
use crate::models::{Scenario, TargetModel};

pub const TABLE_ONE_LABELS: [&str; 5] = ["blue", "red", "yellow", "purple", "green"];
pub const TABLE_ONE_A: [f64; 5] = [0.3487, 0.1915, 0.4612, 0.2951, 0.1110];
pub const TABLE_ONE_Q: [f64; 5] = [1.1924, 1.2597, 0.8808, 1.7925, 0.4363];
pub const TABLE_ONE_R: [f64; 5] = [2.3140, 7.1456, 4.2031, 5.2866, 7.5314];
/// Side of the square the targets are drawn from.
pub const TABLE_ONE_SIDE: f64 = 0.5;

pub fn table_one_targets(positions: &[[f64; 2]]) -> Vec<TargetModel> {
    (0..5)
        .map(|k| {
            let mut t = TargetModel::scalar(k + 1, TABLE_ONE_A[k], TABLE_ONE_Q[k], TABLE_ONE_R[k]);
            t.label = TABLE_ONE_LABELS[k].to_string();
            t.position = positions.get(k).copied();
            t
        })
        .collect()
}

/// The benchmark with target positions drawn from `seed`.
pub fn table_one(seed: u64) -> Scenario {
    let positions = uniform_positions(5, TABLE_ONE_SIDE, seed);
    let graph = MonitoringGraph::euclidean(&positions).expect("finite positions");
    Scenario::new(table_one_targets(&positions), graph)
}
