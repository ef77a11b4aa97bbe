//! Online tile selection: round-up Q tile and a calibrated KV-tile step
//! function per Q tile.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::sim::{simulate, CtaTask, StreamMode};
use crate::tile::feasible::FeasibleSet;
use crate::tile::hardware::HardwareModel;
use crate::workload::{BlockId, WorkloadSpec};

/// Q tile for a pack, and how many query groups the pack must be cut into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QTile {
    pub m: u32,
    pub splits: usize,
}

/// Smallest feasible `m >= q`; packs larger than the largest feasible `m`
/// are cut into `ceil(q / m_max)` groups of `m_max`-row tiles.
pub fn select_q_tile(q: usize, fs: &FeasibleSet) -> Result<QTile> {
    let ms = fs.q_tiles();
    let &m_max = ms.last().ok_or(Error::EmptyFeasibleSet)?;
    if q == 0 {
        return Err(Error::Precondition("a pack needs at least one query".into()));
    }
    Ok(match ms.iter().find(|&&m| m as usize >= q) {
        Some(&m) => QTile { m, splits: 1 },
        None => QTile { m: m_max, splits: q.div_ceil(m_max as usize) },
    })
}

/// One step: every KV length up to and including `max_kv` uses `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub max_kv: usize,
    pub n: u32,
}

/// Step function from KV length to KV tile. Lengths past the last step use
/// the last step's tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiecewiseMap {
    pub steps: Vec<Step>,
}

impl PiecewiseMap {
    /// Builds from `(kv_len, n)` samples sorted by length, merging runs of
    /// equal `n`.
    pub fn from_samples(samples: &[(usize, u32)]) -> Result<Self> {
        let mut steps: Vec<Step> = Vec::new();
        for &(kv, n) in samples {
            if steps.last().is_some_and(|s| s.max_kv >= kv) {
                return Err(Error::Precondition("samples must be strictly increasing in kv_len".into()));
            }
            match steps.last_mut() {
                Some(s) if s.n == n => s.max_kv = kv,
                _ => steps.push(Step { max_kv: kv, n }),
            }
        }
        if steps.is_empty() {
            return Err(Error::Precondition("no calibration samples".into()));
        }
        Ok(PiecewiseMap { steps })
    }

    pub fn lookup(&self, kv_len: usize) -> u32 {
        let i = self.steps.partition_point(|s| s.max_kv < kv_len);
        self.steps.get(i).unwrap_or_else(|| self.steps.last().expect("non-empty")).n
    }
}

/// One step function per Q tile.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NTree {
    pub maps: BTreeMap<u32, PiecewiseMap>,
}

impl NTree {
    pub fn select(&self, m: u32, kv_len: usize) -> Result<u32> {
        self.maps
            .get(&m)
            .map(|map| map.lookup(kv_len))
            .ok_or_else(|| Error::NoFeasibleConfig(format!("no calibrated KV tile for m={m}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("n-tree serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidSpec(format!("n-tree: {e}")))
    }
}

pub fn select_kv_tile(kv_len: usize, map: &PiecewiseMap) -> u32 {
    map.lookup(kv_len)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// KV lengths to sample, ascending.
    pub grid: Vec<usize>,
    /// Identical CTAs in each calibration batch.
    pub ctas: usize,
}

impl Default for CalibrationOptions {
    /// Every block multiple up to 1024, then powers of two up to 64K; single
    /// CTA batches.
    fn default() -> Self {
        let mut grid: Vec<usize> = (1..=64).map(|k| k * 16).collect();
        grid.extend((11..=16).map(|k| 1usize << k));
        CalibrationOptions { grid, ctas: 1 }
    }
}

/// Simulated latency of a batch of `ctas` identical single-query tasks.
pub fn calibration_latency(
    m: u32,
    n: u32,
    kv_len: usize,
    ctas: usize,
    fs: &FeasibleSet,
    hw: &HardwareModel,
    spec: &WorkloadSpec,
) -> Result<f64> {
    let cfg = fs
        .get(m, n)
        .ok_or_else(|| Error::NoFeasibleConfig(format!("({m}, {n}) is not feasible")))?;
    let bs = spec.block_size.max(1);
    let blocks: Vec<BlockId> = (0..kv_len.div_ceil(bs) as BlockId).collect();
    let tasks: Vec<CtaTask> = (0..ctas)
        .map(|i| CtaTask {
            pack_index: i,
            query_ids: vec![i],
            block_ids: blocks.clone(),
            block_size: bs,
            kv_len,
            cfg,
            split_index: 0,
            split_of: 1,
        })
        .collect();
    Ok(simulate(&tasks, hw, spec, StreamMode::MultiStream)?.makespan)
}

/// For every feasible `m` and every grid length, picks the feasible `n` with
/// the lowest simulated latency; near-ties (relative 1e-9) go to the larger
/// `n`.
pub fn calibrate_n_tree(
    fs: &FeasibleSet,
    hw: &HardwareModel,
    spec: &WorkloadSpec,
    opts: &CalibrationOptions,
    exec: Execution,
) -> Result<NTree> {
    if fs.is_empty() {
        return Err(Error::EmptyFeasibleSet);
    }
    let mut maps = BTreeMap::new();
    for m in fs.q_tiles() {
        let ns = fs.kv_tiles(m);
        let picks = par::try_map(exec, &opts.grid, |&kv| -> Result<(usize, u32)> {
            let mut best: Option<(f64, u32)> = None;
            for &n in &ns {
                let t = calibration_latency(m, n, kv, opts.ctas.max(1), fs, hw, spec)?;
                best = match best {
                    Some((bt, _)) if t <= bt * (1.0 + 1e-9) => Some((t.min(bt), n)),
                    Some(b) => Some(b),
                    None => Some((t, n)),
                };
            }
            Ok((kv, best.expect("kv_tiles non-empty for a listed m").1))
        })?;
        maps.insert(m, PiecewiseMap::from_samples(&picks)?);
    }
    Ok(NTree { maps })
}

/// A tree that always answers `n`, for fixed-tile runs and tests.
pub fn constant_n_tree(fs: &FeasibleSet, n: u32) -> NTree {
    let maps = fs
        .q_tiles()
        .into_iter()
        .map(|m| (m, PiecewiseMap { steps: vec![Step { max_kv: usize::MAX, n }] }))
        .collect();
    NTree { maps }
}
