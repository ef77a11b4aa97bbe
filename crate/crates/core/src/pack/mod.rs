//! Pack stage: turn a block table into CTA packs.

pub mod baselines;
pub mod cache;
pub mod heuristic;
pub mod profit;

pub use baselines::{baseline_naive_per_node, baseline_query_centric};
pub use cache::{CacheStats, PackCache, PackHandle};
pub use heuristic::tree_heuristic;
pub use profit::{intra_node_profit, prefers_merge, scheme_profits, NodeProfit, NodeSummary, ProfitModel, SchemeProfits};

use crate::error::Result;
use crate::forest::{build_forest, PrefixForest};
use crate::partition::Partition;
use crate::workload::BlockTable;

/// Builds the forest and runs the tree packer on every root.
pub fn pack_table(table: &BlockTable) -> Result<Partition> {
    let forest = build_forest(table)?;
    Ok(pack_forest(&forest, table.fingerprint()))
}

pub fn pack_forest(forest: &PrefixForest, fingerprint: String) -> Partition {
    let packs = forest.roots.iter().flat_map(|r| tree_heuristic(r, &[], 0)).collect();
    Partition::new(packs, fingerprint)
}
