//! Reference packings the heuristic is compared against.

use crate::forest::{PrefixForest, PrefixNode};
use crate::partition::{CtaPack, Partition};
use crate::workload::BlockTable;

/// One CTA per query over its whole row.
pub fn baseline_query_centric(table: &BlockTable) -> Partition {
    let packs = table
        .rows
        .iter()
        .enumerate()
        .map(|(q, row)| CtaPack::new(vec![q], row.clone(), table.kv_len(q)))
        .collect();
    Partition::new(packs, table.fingerprint())
}

/// One CTA per forest node with its own (non-empty) blocks and every query
/// below it.
pub fn baseline_naive_per_node(forest: &PrefixForest, fingerprint: String) -> Partition {
    fn walk(node: &PrefixNode, out: &mut Vec<CtaPack>) {
        if !node.block_ids.is_empty() {
            out.push(CtaPack::new(node.subtree_queries(), node.block_ids.clone(), node.l));
        }
        for c in &node.children {
            walk(c, out);
        }
    }
    let mut packs = Vec::new();
    for r in &forest.roots {
        walk(r, &mut packs);
    }
    Partition::new(packs, fingerprint)
}
