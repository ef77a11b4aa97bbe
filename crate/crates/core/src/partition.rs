//! CTA packs and the partitions built from them.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{BlockId, BlockTable, QueryId};

/// A set of queries that all attend to one contiguous run of KV blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtaPack {
    #[serde(rename = "queries")]
    pub query_ids: Vec<QueryId>,
    #[serde(rename = "blocks")]
    pub block_ids: Vec<BlockId>,
    pub kv_len: usize,
    /// True when at least one of the pack's queries also appears in another
    /// pack, so this pack emits partial results for merging.
    #[serde(skip)]
    pub produces_partial: bool,
}

impl CtaPack {
    pub fn new(query_ids: Vec<QueryId>, block_ids: Vec<BlockId>, kv_len: usize) -> Self {
        CtaPack { query_ids, block_ids, kv_len, produces_partial: false }
    }

    pub fn q(&self) -> usize {
        self.query_ids.len()
    }
}

/// Packs covering a block table, tagged with the table's fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawPartition")]
pub struct Partition {
    pub packs: Vec<CtaPack>,
    #[serde(rename = "fingerprint")]
    pub source_fingerprint: String,
}

#[derive(Deserialize)]
struct RawPartition {
    packs: Vec<CtaPack>,
    fingerprint: String,
}

impl From<RawPartition> for Partition {
    fn from(raw: RawPartition) -> Self {
        Partition::new(raw.packs, raw.fingerprint)
    }
}

impl Partition {
    pub fn new(packs: Vec<CtaPack>, source_fingerprint: String) -> Self {
        let mut p = Partition { packs, source_fingerprint };
        p.refresh_partial_flags();
        p
    }

    pub fn empty(source_fingerprint: String) -> Self {
        Partition { packs: Vec::new(), source_fingerprint }
    }

    pub fn len(&self) -> usize {
        self.packs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packs.is_empty()
    }

    fn refresh_partial_flags(&mut self) {
        let counts = pack_multiplicity(self.packs.iter().map(|p| p.query_ids.as_slice()));
        for p in &mut self.packs {
            p.produces_partial = p.query_ids.iter().any(|q| counts[q] > 1);
        }
    }

    /// Checks that every query's KV is covered exactly once, in contiguous
    /// runs of its own row.
    pub fn check_coverage(&self, table: &BlockTable) -> Result<()> {
        check_spans(table, self.packs.iter().map(|p| (p.query_ids.as_slice(), p.block_ids.as_slice())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serializes")
    }
}

/// How many units each query appears in.
pub fn pack_multiplicity<'a, I>(units: I) -> HashMap<QueryId, usize>
where
    I: IntoIterator<Item = &'a [QueryId]>,
{
    let mut counts = HashMap::new();
    for qs in units {
        for &q in qs {
            *counts.entry(q).or_insert(0) += 1;
        }
    }
    counts
}

/// Coverage check shared by partitions and task lists: each `(queries,
/// blocks)` unit must be a contiguous run of every listed query's row, and the
/// runs of one query must tile its row with no gap or overlap.
pub fn check_spans<'a, I>(table: &BlockTable, units: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a [QueryId], &'a [BlockId])>,
{
    let positions: Vec<HashMap<BlockId, usize>> = table
        .rows
        .iter()
        .map(|row| row.iter().enumerate().map(|(i, &b)| (b, i)).collect())
        .collect();
    let mut spans: Vec<Vec<(usize, usize)>> = vec![Vec::new(); table.num_queries()];

    for (queries, blocks) in units {
        if queries.is_empty() {
            return Err(Error::InvalidPartition("pack with no queries".into()));
        }
        if blocks.is_empty() {
            return Err(Error::InvalidPartition("pack with an empty KV span".into()));
        }
        let mut seen = HashSet::with_capacity(queries.len());
        for &q in queries {
            if q >= table.num_queries() {
                return Err(Error::InvalidPartition(format!("unknown query {q}")));
            }
            if !seen.insert(q) {
                return Err(Error::InvalidPartition(format!("query {q} listed twice in one pack")));
            }
            let row = &table.rows[q];
            let start = *positions[q].get(&blocks[0]).ok_or_else(|| Error::CoverageGap {
                query: q,
                detail: format!("block {} is not in its row", blocks[0]),
            })?;
            if row.get(start..start + blocks.len()) != Some(blocks) {
                return Err(Error::CoverageGap {
                    query: q,
                    detail: format!("pack span starting at block {} is not a run of its row", blocks[0]),
                });
            }
            spans[q].push((start, start + blocks.len()));
        }
    }

    for (q, s) in spans.iter_mut().enumerate() {
        s.sort_unstable();
        let mut cursor = 0;
        for &(a, b) in s.iter() {
            if a != cursor {
                let detail = if a < cursor {
                    format!("overlap at block position {a}")
                } else {
                    format!("gap over block positions {cursor}..{a}")
                };
                return Err(Error::CoverageGap { query: q, detail });
            }
            cursor = b;
        }
        if cursor != table.rows[q].len() {
            return Err(Error::CoverageGap {
                query: q,
                detail: format!("covered {cursor} of {} blocks", table.rows[q].len()),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> BlockTable {
        BlockTable::from_rows(16, vec![vec![0, 1, 2], vec![0, 1, 3]])
    }

    #[test]
    fn valid_partition_passes_and_flags_partials() {
        let t = table();
        let p = Partition::new(
            vec![
                CtaPack::new(vec![0, 1], vec![0, 1], 32),
                CtaPack::new(vec![0], vec![2], 16),
                CtaPack::new(vec![1], vec![3], 16),
            ],
            t.fingerprint(),
        );
        p.check_coverage(&t).unwrap();
        assert!(p.packs.iter().all(|pk| pk.produces_partial));

        let whole = Partition::new(
            vec![CtaPack::new(vec![0], vec![0, 1, 2], 48), CtaPack::new(vec![1], vec![0, 1, 3], 48)],
            t.fingerprint(),
        );
        whole.check_coverage(&t).unwrap();
        assert!(whole.packs.iter().all(|pk| !pk.produces_partial));
    }

    #[test]
    fn gaps_and_overlaps_are_reported() {
        let t = table();
        let gap = Partition::new(
            vec![CtaPack::new(vec![0, 1], vec![0], 16), CtaPack::new(vec![0], vec![2], 16)],
            String::new(),
        );
        assert!(matches!(gap.check_coverage(&t), Err(Error::CoverageGap { query: 0, .. })));

        let overlap = Partition::new(
            vec![
                CtaPack::new(vec![0, 1], vec![0, 1], 32),
                CtaPack::new(vec![0], vec![1, 2], 32),
                CtaPack::new(vec![1], vec![3], 16),
            ],
            String::new(),
        );
        assert!(matches!(overlap.check_coverage(&t), Err(Error::CoverageGap { query: 0, .. })));

        let foreign = Partition::new(vec![CtaPack::new(vec![0], vec![3], 16)], String::new());
        assert!(foreign.check_coverage(&t).is_err());
    }

    #[test]
    fn json_shape() {
        let p = Partition::new(
            vec![CtaPack::new(vec![0, 1], vec![0, 1], 32), CtaPack::new(vec![0], vec![2], 16)],
            "ab12".into(),
        );
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["fingerprint"], "ab12");
        assert_eq!(v["packs"][0]["queries"], serde_json::json!([0, 1]));
        assert_eq!(v["packs"][1]["blocks"], serde_json::json!([2]));
        assert_eq!(v["packs"][1]["kv_len"], 16);
        let back: Partition = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
        assert!(back.packs[0].produces_partial);
    }
}
