//! Memory-profit model for packing decisions.
//!
//! Profits count saved global-memory element accesses (KV elements not
//! reloaded); overheads count intermediate partial-result reads and writes,
//! already doubled for FP32 intermediates. Everything is in head-dimension
//! element units; byte weighting happens in traffic accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfitModel {
    pub head_dim: usize,
}

impl ProfitModel {
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::Precondition("head dim must be at least 1".into()));
        }
        Ok(ProfitModel { head_dim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeProfit {
    pub profit_elems: i64,
    pub overhead_elems: i64,
    pub ratio: f64,
}

/// Profit of packing the `s` queries of one node (shared length `l`) into a
/// single CTA instead of one CTA per query.
pub fn intra_node_profit(s: usize, l: usize, d: usize) -> Result<NodeProfit> {
    if s == 0 {
        return Err(Error::Precondition("a node needs at least one query".into()));
    }
    let (s, l, d) = (s as i64, l as i64, d as i64);
    let profit = (s - 1) * l * d;
    let overhead = 8 * s * d;
    let ratio = if overhead == 0 { 0.0 } else { profit as f64 / overhead as f64 };
    Ok(NodeProfit { profit_elems: profit, overhead_elems: overhead, ratio })
}

/// `(l, s)` summary of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub l: usize,
    pub s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeProfits {
    /// Every node in its own CTA.
    pub scheme1_profit: i64,
    /// Child `i` merged into the parent's CTA.
    pub scheme2_profit: i64,
    /// `scheme2 - scheme1`, always `(4 s_i - l_u) d`.
    pub delta: i64,
}

/// Split-vs-merge comparison for parent `u` and its children.
///
/// Without `merge_child` only the split profit is meaningful; `scheme2_profit`
/// then equals it and `delta` is zero.
pub fn scheme_profits(
    u: NodeSummary,
    children: &[NodeSummary],
    merge_child: Option<usize>,
    d: usize,
) -> Result<SchemeProfits> {
    let total: usize = children.iter().map(|c| c.s).sum();
    if total != u.s {
        return Err(Error::Precondition(format!(
            "parent has s={} but children sum to {total}",
            u.s
        )));
    }
    let d = d as i64;
    let (lu, su) = (u.l as i64, u.s as i64);
    let child_profit = |c: &NodeSummary| (c.s as i64 - 1) * c.l as i64 * d;

    let scheme1 = (su - 1) * lu * d - 4 * su * d + children.iter().map(child_profit).sum::<i64>();
    let Some(i) = merge_child else {
        return Ok(SchemeProfits { scheme1_profit: scheme1, scheme2_profit: scheme1, delta: 0 });
    };
    let merged = children
        .get(i)
        .ok_or(Error::InvalidChildIndex { index: i, children: children.len() })?;
    let (li, si) = (merged.l as i64, merged.s as i64);
    let others: i64 = children
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != i)
        .map(|(_, c)| child_profit(c))
        .sum();
    let scheme2 = (su - si - 1) * lu * d - 4 * (su - si) * d + others + (si - 1) * (lu + li) * d;
    Ok(SchemeProfits { scheme1_profit: scheme1, scheme2_profit: scheme2, delta: scheme2 - scheme1 })
}

/// Merge decision used by the packer: merge only when `4 s_child` strictly
/// exceeds the KV length the child would have to re-read. Ties split.
pub fn prefers_merge(child_queries: usize, parent_span_tokens: usize) -> bool {
    4 * child_queries > parent_span_tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intra_node_examples() {
        let p = intra_node_profit(2, 16, 128).unwrap();
        assert_eq!((p.profit_elems, p.overhead_elems), (2048, 2048));
        assert_eq!(p.ratio, 1.0);

        assert_eq!(intra_node_profit(1, 1024, 128).unwrap().profit_elems, 0);

        let p = intra_node_profit(4, 64, 128).unwrap();
        assert_eq!((p.profit_elems, p.overhead_elems), (24576, 4096));
        assert_eq!(p.ratio, 6.0);

        assert!(intra_node_profit(0, 16, 128).is_err());
        assert!(ProfitModel::new(0).is_err());
    }

    #[test]
    fn scheme_delta_examples() {
        let u = NodeSummary { l: 128, s: 4 };
        let kids = [NodeSummary { l: 64, s: 3 }, NodeSummary { l: 256, s: 1 }];
        let r = scheme_profits(u, &kids, Some(0), 128).unwrap();
        assert_eq!(r.delta, -14848);
        assert!(!prefers_merge(3, 128));

        let u = NodeSummary { l: 128, s: 41 };
        let kids = [NodeSummary { l: 16, s: 40 }, NodeSummary { l: 16, s: 1 }];
        let r = scheme_profits(u, &kids, Some(0), 128).unwrap();
        assert_eq!(r.delta, 4096);
        assert!(prefers_merge(40, 128));

        let u = NodeSummary { l: 32, s: 9 };
        let kids = [NodeSummary { l: 16, s: 8 }, NodeSummary { l: 16, s: 1 }];
        let r = scheme_profits(u, &kids, Some(0), 128).unwrap();
        assert_eq!(r.delta, 0);
        assert!(!prefers_merge(8, 32));
    }

    #[test]
    fn scheme_errors() {
        let u = NodeSummary { l: 16, s: 2 };
        let kids = [NodeSummary { l: 16, s: 1 }, NodeSummary { l: 16, s: 1 }];
        assert_eq!(
            scheme_profits(u, &kids, Some(2), 128),
            Err(Error::InvalidChildIndex { index: 2, children: 2 })
        );
        assert!(scheme_profits(NodeSummary { l: 16, s: 3 }, &kids, None, 128).is_err());
    }

    proptest::proptest! {
        #[test]
        fn delta_has_closed_form(
            lu in 0usize..4096,
            kids in proptest::collection::vec((0usize..4096, 1usize..64), 1..6),
            pick in 0usize..6,
            d in 1usize..256,
        ) {
            let children: Vec<NodeSummary> = kids.iter().map(|&(l, s)| NodeSummary { l, s }).collect();
            let u = NodeSummary { l: lu, s: children.iter().map(|c| c.s).sum() };
            let i = pick % children.len();
            let r = scheme_profits(u, &children, Some(i), d).unwrap();
            let expect = (4 * children[i].s as i64 - lu as i64) * d as i64;
            proptest::prop_assert_eq!(r.delta, expect);
            proptest::prop_assert_eq!(r.delta > 0, prefers_merge(children[i].s, lu));
        }
    }
}
