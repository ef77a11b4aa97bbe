//! CTA tasks: packs after tile selection, ready to be split and scheduled.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{check_spans, Partition};
use crate::tile::{FeasibleSet, NTree, TileConfig};
use crate::workload::{BlockId, BlockTable, QueryId, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtaTask {
    /// Index of the pack this task came from.
    pub pack_index: usize,
    pub query_ids: Vec<QueryId>,
    pub block_ids: Vec<BlockId>,
    pub block_size: usize,
    pub kv_len: usize,
    pub cfg: TileConfig,
    pub split_index: u32,
    pub split_of: u32,
}

impl CtaTask {
    pub fn q(&self) -> usize {
        self.query_ids.len()
    }

    pub fn stream_key(&self) -> (u32, u32) {
        (self.cfg.m, self.cfg.n)
    }

    /// Tokens held by each block; only the final block may be partial.
    fn block_token_counts(&self) -> Vec<usize> {
        let nb = self.block_ids.len();
        let mut t = vec![self.block_size; nb];
        if nb > 0 {
            t[nb - 1] = self.kv_len - (nb - 1) * self.block_size;
        }
        t
    }
}

/// How tiles are assigned to packs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TilePolicy {
    /// Round-up Q tile, calibrated KV tile.
    Adaptive,
    /// One configuration for every CTA.
    Fixed { m: u32, n: u32 },
}

/// Selects tiles for every pack. Packs with more queries than the largest
/// usable Q tile are first divided into near-equal query groups, each of which
/// re-reads the pack's KV.
pub fn plan_tasks(
    partition: &Partition,
    block_size: usize,
    fs: &FeasibleSet,
    ntree: &NTree,
    policy: TilePolicy,
) -> Result<Vec<CtaTask>> {
    let mut tasks = Vec::with_capacity(partition.len());
    for (pi, pack) in partition.packs.iter().enumerate() {
        let m_cap = match policy {
            TilePolicy::Adaptive => *fs.q_tiles().last().ok_or(Error::EmptyFeasibleSet)? as usize,
            TilePolicy::Fixed { m, .. } => m as usize,
        };
        let groups = pack.q().div_ceil(m_cap).max(1);
        for g in 0..groups {
            let lo = g * pack.q() / groups;
            let hi = (g + 1) * pack.q() / groups;
            let queries = pack.query_ids[lo..hi].to_vec();
            let cfg = match policy {
                TilePolicy::Adaptive => {
                    let m = crate::tile::select_q_tile(queries.len(), fs)?.m;
                    let n = ntree.select(m, pack.kv_len)?;
                    fs.get(m, n).ok_or_else(|| {
                        Error::NoFeasibleConfig(format!("calibrated ({m}, {n}) is not in the feasible set"))
                    })?
                }
                TilePolicy::Fixed { m, n } => fs
                    .get(m, n)
                    .ok_or_else(|| Error::NoFeasibleConfig(format!("fixed tile ({m}, {n}) is not feasible")))?,
            };
            tasks.push(CtaTask {
                pack_index: pi,
                query_ids: queries,
                block_ids: pack.block_ids.clone(),
                block_size,
                kv_len: pack.kv_len,
                cfg,
                split_index: 0,
                split_of: 1,
            });
        }
    }
    Ok(tasks)
}

/// Splits every task whose KV exceeds the batch mean into
/// `ceil(kv_len / mean)` block-aligned parts of near-equal length.
pub fn split_long_kv(tasks: Vec<CtaTask>) -> Vec<CtaTask> {
    if tasks.is_empty() {
        return tasks;
    }
    let mean = tasks.iter().map(|t| t.kv_len as f64).sum::<f64>() / tasks.len() as f64;
    let mut out = Vec::with_capacity(tasks.len());
    for t in tasks {
        if (t.kv_len as f64) <= mean {
            out.push(t);
            continue;
        }
        let nb = t.block_ids.len();
        let k = ((t.kv_len as f64 / mean).ceil() as usize).clamp(1, nb);
        if k == 1 {
            out.push(t);
            continue;
        }
        let tokens = t.block_token_counts();
        let mut start = 0;
        for i in 0..k {
            let take = nb / k + usize::from(i < nb % k);
            let blocks = t.block_ids[start..start + take].to_vec();
            let kv_len = tokens[start..start + take].iter().sum();
            start += take;
            out.push(CtaTask {
                block_ids: blocks,
                kv_len,
                split_index: i as u32,
                split_of: k as u32,
                query_ids: t.query_ids.clone(),
                ..t.clone()
            });
        }
    }
    out
}

/// Groups task indices by `(m, n)`; each group is one stream, in enqueue
/// order. Stream ids are the map's iteration order.
pub fn assign_streams(tasks: &[CtaTask]) -> BTreeMap<(u32, u32), Vec<usize>> {
    let mut streams: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, t) in tasks.iter().enumerate() {
        streams.entry(t.stream_key()).or_default().push(i);
    }
    streams
}

pub fn check_task_coverage(table: &BlockTable, tasks: &[CtaTask]) -> Result<()> {
    check_spans(table, tasks.iter().map(|t| (t.query_ids.as_slice(), t.block_ids.as_slice())))
}

pub fn task_traffic(tasks: &[CtaTask], spec: &WorkloadSpec) -> super::TrafficReport {
    super::account_units(tasks.iter().map(|t| (t.query_ids.as_slice(), t.kv_len)), spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kv_len: usize, block_size: usize, m: u32, n: u32) -> CtaTask {
        let nb = kv_len.div_ceil(block_size);
        CtaTask {
            pack_index: 0,
            query_ids: vec![0],
            block_ids: (0..nb as BlockId).collect(),
            block_size,
            kv_len,
            cfg: TileConfig { m, n, concurrency: 1 },
            split_index: 0,
            split_of: 1,
        }
    }

    #[test]
    fn long_task_splits_into_equal_parts() {
        let out = split_long_kv(vec![task(100, 1, 16, 64), task(100, 1, 16, 64), task(1000, 1, 16, 64)]);
        let lens: Vec<usize> = out.iter().map(|t| t.kv_len).collect();
        assert_eq!(lens, vec![100, 100, 334, 333, 333]);
        assert_eq!(out[2..].iter().map(|t| (t.split_index, t.split_of)).collect::<Vec<_>>(), vec![(0, 3), (1, 3), (2, 3)]);
        assert_eq!(out[3].block_ids.first(), Some(&334));
    }

    #[test]
    fn uniform_and_single_are_identity() {
        let same = vec![task(64, 16, 16, 64); 4];
        assert_eq!(split_long_kv(same.clone()), same);
        let one = vec![task(4096, 16, 16, 64)];
        assert_eq!(split_long_kv(one.clone()), one);
        assert!(split_long_kv(vec![]).is_empty());
    }

    #[test]
    fn partial_last_block_is_kept_on_last_part() {
        let out = split_long_kv(vec![task(16, 16, 16, 16), task(16, 16, 16, 16), task(70, 16, 16, 16)]);
        // mean = 34, k = 3 over 5 blocks: 2 + 2 + 1 blocks; last block has 6 tokens
        let lens: Vec<usize> = out[2..].iter().map(|t| t.kv_len).collect();
        assert_eq!(lens, vec![32, 32, 6]);
        assert_eq!(out.iter().map(|t| t.kv_len).sum::<usize>(), 16 + 16 + 70);
    }

    #[test]
    fn streams_group_by_config() {
        let tasks = vec![task(16, 16, 32, 128), task(16, 16, 16, 64), task(32, 16, 32, 128)];
        let s = assign_streams(&tasks);
        assert_eq!(s.len(), 2);
        assert_eq!(s[&(16, 64)], vec![1]);
        assert_eq!(s[&(32, 128)], vec![0, 2]);
        assert_eq!(assign_streams(&tasks[..1]).len(), 1);
        assert!(assign_streams(&[]).is_empty());
    }
}
