//! End-to-end strategies: pack, select tiles, split, simulate, verify.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{self, KvBlockStore, Precision, Unit};
use crate::error::{Error, Result};
use crate::forest::build_forest;
use crate::pack::{baseline_naive_per_node, baseline_query_centric, pack_table};
use crate::par::Execution;
use crate::partition::Partition;
use crate::sim::{plan_tasks, simulate, split_long_kv, CtaTask, SimReport, StreamMode, TilePolicy};
use crate::tile::{
    calibrate_n_tree, solve_feasible, CalibrationOptions, CandidateRange, FeasibleSet, HardwareModel, NTree,
    RegisterUsageTable, TileContext,
};
use crate::workload::{BlockTable, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Pat,
    QueryCentric,
    Naive,
    PatFixedTile,
    PatSerialStreams,
    PatNoSplit,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Pat,
        Strategy::QueryCentric,
        Strategy::Naive,
        Strategy::PatFixedTile,
        Strategy::PatSerialStreams,
        Strategy::PatNoSplit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Pat => "pat",
            Strategy::QueryCentric => "query_centric",
            Strategy::Naive => "naive",
            Strategy::PatFixedTile => "pat_fixed_tile",
            Strategy::PatSerialStreams => "pat_serial_streams",
            Strategy::PatNoSplit => "pat_no_split",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown strategy '{s}'")))
    }
}

/// Tile used by the fixed-tile ablation.
pub const FIXED_TILE: (u32, u32) = (64, 128);

/// Hardware plus the offline tile artifacts derived from it.
#[derive(Debug, Clone)]
pub struct TileSetup {
    pub hardware: HardwareModel,
    pub feasible: FeasibleSet,
    pub ntree: NTree,
}

impl TileSetup {
    pub fn build(
        hardware: HardwareModel,
        regs: &RegisterUsageTable,
        spec: &WorkloadSpec,
        calibration: &CalibrationOptions,
        exec: Execution,
    ) -> Result<Self> {
        let ctx = TileContext::new(spec.heads.dim, spec.dtype_bytes.kv, spec.dtype_bytes.intermediate);
        let feasible = solve_feasible(&hardware, regs, &ctx, &CandidateRange::default());
        if feasible.is_empty() {
            return Err(Error::EmptyFeasibleSet);
        }
        let ntree = calibrate_n_tree(&feasible, &hardware, spec, calibration, exec)?;
        Ok(TileSetup { hardware, feasible, ntree })
    }
}

/// One line of a comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: Strategy,
    pub kv_bytes: u64,
    pub intermediate_bytes: u64,
    pub total_bytes: u64,
    pub makespan_ns: f64,
    pub mem_waste: f64,
    pub exec_bubble: f64,
    pub pack_count: usize,
    pub task_count: usize,
    pub verified: Option<bool>,
    pub max_rel_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub tolerance: f64,
    pub precision: Precision,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, tolerance: 1e-10, precision: Precision::F64 }
    }
}

#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub row: StrategyRow,
    pub partition: Partition,
    pub tasks: Vec<CtaTask>,
    pub report: SimReport,
}

pub fn partition_for(strategy: Strategy, table: &BlockTable) -> Result<Partition> {
    match strategy {
        Strategy::QueryCentric => {
            table.validate()?;
            Ok(baseline_query_centric(table))
        }
        Strategy::Naive => Ok(baseline_naive_per_node(&build_forest(table)?, table.fingerprint())),
        _ => pack_table(table),
    }
}

/// Tasks for a strategy's partition, after tile selection and (unless
/// disabled) the long-KV split.
pub fn tasks_for(strategy: Strategy, partition: &Partition, table: &BlockTable, setup: &TileSetup) -> Result<Vec<CtaTask>> {
    let policy = match strategy {
        Strategy::PatFixedTile => TilePolicy::Fixed { m: FIXED_TILE.0, n: FIXED_TILE.1 },
        _ => TilePolicy::Adaptive,
    };
    let tasks = plan_tasks(partition, table.block_size, &setup.feasible, &setup.ntree, policy)?;
    Ok(match strategy {
        Strategy::PatNoSplit => tasks,
        _ => split_long_kv(tasks),
    })
}

pub fn units_of(tasks: &[CtaTask]) -> Vec<Unit<'_>> {
    tasks.iter().map(|t| (t.query_ids.as_slice(), t.block_ids.as_slice())).collect()
}

/// Max relative error of the packed pipeline against full attention on
/// seeded random tensors.
pub fn verify_tasks(
    table: &BlockTable,
    tasks: &[CtaTask],
    spec: &WorkloadSpec,
    opts: &VerifyOptions,
    exec: Execution,
) -> Result<f64> {
    let store = KvBlockStore::random(table, spec.heads, opts.seed);
    let q = attention::random_queries(table.num_queries(), spec.heads, opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let want = attention::reference_output(table, &store, &q, spec.heads)?;
    let got = attention::run_packed_attention(table, &units_of(tasks), &store, &q, spec.heads, opts.precision, exec)?;
    attention::max_relative_error(&got, &want)
}

pub fn run_strategy(
    strategy: Strategy,
    table: &BlockTable,
    spec: &WorkloadSpec,
    setup: &TileSetup,
    verify: Option<&VerifyOptions>,
    exec: Execution,
) -> Result<StrategyRun> {
    let partition = partition_for(strategy, table)?;
    let tasks = tasks_for(strategy, &partition, table, setup)?;
    let mode = match strategy {
        Strategy::PatSerialStreams => StreamMode::Serial,
        _ => StreamMode::MultiStream,
    };
    let report = simulate(&tasks, &setup.hardware, spec, mode)?;
    let (verified, max_rel_error) = match verify {
        Some(opts) => {
            let err = verify_tasks(table, &tasks, spec, opts, exec)?;
            (Some(err <= opts.tolerance), Some(err))
        }
        None => (None, None),
    };
    let row = StrategyRow {
        strategy,
        kv_bytes: report.kv_bytes_loaded,
        intermediate_bytes: report.intermediate_bytes,
        total_bytes: report.kv_bytes_loaded + report.intermediate_bytes,
        makespan_ns: report.makespan,
        mem_waste: report.mem_waste,
        exec_bubble: report.exec_bubble,
        pack_count: partition.len(),
        task_count: tasks.len(),
        verified,
        max_rel_error,
    };
    Ok(StrategyRun { row, partition, tasks, report })
}
