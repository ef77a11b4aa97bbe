//! Execution modeling: CTA tasks, traffic accounting and the event-driven
//! simulator.

pub mod engine;
pub mod task;
pub mod traffic;

pub use engine::{isolated_latency, simulate, SimReport, StreamMode, StreamSpan, TaskRecord};
pub use task::{assign_streams, check_task_coverage, plan_tasks, split_long_kv, task_traffic, CtaTask, TilePolicy};
pub use traffic::{
    account_traffic, account_units, kv_bytes_per_token, modeled_minimum, modeled_traffic, modeled_units,
    partial_bytes, theoretical_minimum, ModeledTraffic, TrafficReport,
};
