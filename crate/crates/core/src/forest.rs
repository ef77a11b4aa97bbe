//! Tree-structured view of a block table.
//!
//! Each root is a distinct first block; each internal node holds the longest
//! block run shared by every query below it; leaves hold one query's
//! non-shared suffix, which may be empty when a row ends exactly at a shared
//! node.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::workload::{BlockId, BlockTable, QueryId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixNode {
    pub block_ids: Vec<BlockId>,
    /// Tokens covered by `block_ids`.
    pub l: usize,
    /// Queries in this subtree.
    pub s: usize,
    pub children: Vec<PrefixNode>,
    /// Non-empty only at leaves.
    pub query_ids: Vec<QueryId>,
}

impl PrefixNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn leaf(query: QueryId, block_ids: Vec<BlockId>, l: usize) -> Self {
        PrefixNode { block_ids, l, s: 1, children: Vec::new(), query_ids: vec![query] }
    }

    pub fn internal(block_ids: Vec<BlockId>, l: usize, children: Vec<PrefixNode>) -> Self {
        let s = children.iter().map(|c| c.s).sum();
        PrefixNode { block_ids, l, s, children, query_ids: Vec::new() }
    }

    /// Queries of the subtree in depth-first order.
    pub fn subtree_queries(&self) -> Vec<QueryId> {
        let mut out = Vec::with_capacity(self.s);
        self.collect_queries(&mut out);
        out
    }

    fn collect_queries(&self, out: &mut Vec<QueryId>) {
        out.extend_from_slice(&self.query_ids);
        for c in &self.children {
            c.collect_queries(out);
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(PrefixNode::node_count).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(PrefixNode::depth).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrefixForest {
    pub roots: Vec<PrefixNode>,
}

impl PrefixForest {
    pub fn node_count(&self) -> usize {
        self.roots.iter().map(PrefixNode::node_count).sum()
    }

    pub fn num_queries(&self) -> usize {
        self.roots.iter().map(|r| r.s).sum()
    }

    /// Reconstructs every query's block row by concatenating blocks along its
    /// root-to-leaf path.
    pub fn flatten(&self) -> Vec<(QueryId, Vec<BlockId>)> {
        fn walk(node: &PrefixNode, prefix: &mut Vec<BlockId>, out: &mut Vec<(QueryId, Vec<BlockId>)>) {
            let mark = prefix.len();
            prefix.extend_from_slice(&node.block_ids);
            for &q in &node.query_ids {
                out.push((q, prefix.clone()));
            }
            for c in &node.children {
                walk(c, prefix, out);
            }
            prefix.truncate(mark);
        }
        let mut out = Vec::new();
        for r in &self.roots {
            walk(r, &mut Vec::new(), &mut out);
        }
        out.sort_by_key(|(q, _)| *q);
        out
    }
}

/// Converts a block table into its prefix forest.
pub fn build_forest(table: &BlockTable) -> Result<PrefixForest> {
    table.validate()?;
    let tokens = table.block_tokens();
    let all: Vec<QueryId> = (0..table.num_queries()).collect();
    let roots = group_by_block(table, &all, 0)
        .into_iter()
        .map(|group| build_node(table, &tokens, group, 0))
        .collect();
    Ok(PrefixForest { roots })
}

/// Groups queries by their block at `offset`, in order of first appearance.
fn group_by_block(table: &BlockTable, queries: &[QueryId], offset: usize) -> Vec<Vec<QueryId>> {
    let mut order: Vec<BlockId> = Vec::new();
    let mut groups: HashMap<BlockId, Vec<QueryId>> = HashMap::new();
    for &q in queries {
        let id = table.rows[q][offset];
        groups
            .entry(id)
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(q);
    }
    order.into_iter().map(|id| groups.remove(&id).unwrap()).collect()
}

fn run_tokens(tokens: &HashMap<BlockId, usize>, run: &[BlockId]) -> usize {
    run.iter().map(|id| tokens[id]).sum()
}

fn build_node(
    table: &BlockTable,
    tokens: &HashMap<BlockId, usize>,
    queries: Vec<QueryId>,
    offset: usize,
) -> PrefixNode {
    let first = &table.rows[queries[0]];
    if queries.len() == 1 {
        let run = first[offset..].to_vec();
        let l = run_tokens(tokens, &run);
        return PrefixNode::leaf(queries[0], run, l);
    }

    let mut end = first.len();
    for &q in &queries[1..] {
        let row = &table.rows[q];
        let common = first[offset..end.min(row.len())]
            .iter()
            .zip(&row[offset..])
            .take_while(|(a, b)| a == b)
            .count();
        end = offset + common;
    }
    let run = first[offset..end].to_vec();
    let l = run_tokens(tokens, &run);

    let (finished, continuing): (Vec<QueryId>, Vec<QueryId>) =
        queries.into_iter().partition(|&q| table.rows[q].len() == end);
    let mut children: Vec<PrefixNode> =
        finished.into_iter().map(|q| PrefixNode::leaf(q, Vec::new(), 0)).collect();
    children.extend(
        group_by_block(table, &continuing, end)
            .into_iter()
            .map(|g| build_node(table, tokens, g, end)),
    );
    PrefixNode::internal(run, l, children)
}
