//! Linear-time tree packer.
//!
//! For every internal node the children are scanned once. A child whose
//! query count makes re-reading the parent's span cheaper than writing and
//! re-reading its partials is merged into the parent's span (its queries
//! leave the parent's CTA); otherwise it is packed on its own. Whatever
//! queries remain at the node form one CTA over the node's span.

use crate::forest::PrefixNode;
use crate::pack::profit::prefers_merge;
use crate::partition::CtaPack;
use crate::workload::{BlockId, QueryId};

/// Packs one tree. `inherited` is the block run (and its token count) merged
/// down from ancestors; pass an empty run for a root.
pub fn tree_heuristic(root: &PrefixNode, inherited: &[BlockId], inherited_tokens: usize) -> Vec<CtaPack> {
    let mut out = Vec::new();
    walk(root, inherited.to_vec(), inherited_tokens, &mut out);
    out
}

/// Returns the queries of `node`'s subtree.
fn walk(node: &PrefixNode, mut span: Vec<BlockId>, span_tokens: usize, out: &mut Vec<CtaPack>) -> Vec<QueryId> {
    span.extend_from_slice(&node.block_ids);
    let span_tokens = span_tokens + node.l;

    if node.is_leaf() {
        if span_tokens > 0 {
            out.push(CtaPack::new(node.query_ids.clone(), span, span_tokens));
        }
        return node.query_ids.clone();
    }

    let mut remaining = Vec::with_capacity(node.s);
    let mut merged = Vec::new();
    for child in &node.children {
        if prefers_merge(child.s, span_tokens) {
            merged.extend(walk(child, span.clone(), span_tokens, out));
        } else {
            remaining.extend(walk(child, Vec::new(), 0, out));
        }
    }
    let mut subtree = remaining.clone();
    subtree.extend_from_slice(&merged);
    if !remaining.is_empty() {
        out.push(CtaPack::new(remaining, span, span_tokens));
    }
    subtree
}
