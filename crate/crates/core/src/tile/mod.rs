//! Tile engine: feasible `(m, n)` solving and per-CTA tile selection.

pub mod feasible;
pub mod hardware;
pub mod selector;

pub use feasible::{
    bandwidth_floor, check_candidate, derive_concurrency, is_valid_tile, solve_feasible, CandidateRange, Constraint,
    FeasibleSet, Rejection, TileConfig, TileContext, MIN_TILE,
};
pub use hardware::{HardwareModel, RegisterUsage, RegisterUsageTable};
pub use selector::{
    calibrate_n_tree, calibration_latency, constant_n_tree, select_kv_tile, select_q_tile, CalibrationOptions, NTree,
    PiecewiseMap, QTile, Step,
};
