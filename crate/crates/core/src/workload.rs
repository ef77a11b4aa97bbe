//! Decode-batch descriptions: the `(B, L)` workload spec and the paged block
//! table generated from it.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type BlockId = u32;
pub type QueryId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Query heads.
    pub q: usize,
    /// KV heads; `q` must be a multiple of it.
    pub kv: usize,
    /// Head dimension.
    pub dim: usize,
}

impl HeadConfig {
    pub fn group_size(&self) -> usize {
        self.q / self.kv
    }

    /// The four `(query heads, kv heads)` pairs used by the synthetic kernel
    /// benchmarks, all at head dimension 128.
    pub fn benchmark_set() -> [HeadConfig; 4] {
        [(64, 8), (32, 8), (16, 8), (32, 32)].map(|(q, kv)| HeadConfig { q, kv, dim: 128 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DtypeBytes {
    /// Bytes per KV-cache element.
    pub kv: usize,
    /// Bytes per stored intermediate (partial result) element.
    pub intermediate: usize,
}

impl Default for DtypeBytes {
    fn default() -> Self {
        DtypeBytes { kv: 2, intermediate: 4 }
    }
}

/// A synthetic decode batch: `B` gives node counts per prefix level (the last
/// entry is the batch size), `L` the token length contributed by each level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(rename = "B")]
    pub level_counts: Vec<usize>,
    #[serde(rename = "L")]
    pub level_lengths: Vec<usize>,
    pub block_size: usize,
    pub heads: HeadConfig,
    pub dtype_bytes: DtypeBytes,
}

impl WorkloadSpec {
    pub fn new(level_counts: Vec<usize>, level_lengths: Vec<usize>, block_size: usize) -> Self {
        WorkloadSpec {
            level_counts,
            level_lengths,
            block_size,
            heads: HeadConfig { q: 32, kv: 8, dim: 128 },
            dtype_bytes: DtypeBytes::default(),
        }
    }

    pub fn with_heads(mut self, heads: HeadConfig) -> Self {
        self.heads = heads;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.heads.dim
    }

    pub fn batch_size(&self) -> usize {
        self.level_counts.last().copied().unwrap_or(0)
    }

    pub fn kv_len_per_query(&self) -> usize {
        self.level_lengths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.level_counts.is_empty() {
            return bad("B must have at least one level".into());
        }
        if self.level_counts.len() != self.level_lengths.len() {
            return bad(format!(
                "B has {} levels but L has {}",
                self.level_counts.len(),
                self.level_lengths.len()
            ));
        }
        if self.block_size == 0 {
            return bad("block_size must be positive".into());
        }
        if self.level_counts.contains(&0) {
            return bad("every B entry must be positive".into());
        }
        for w in self.level_counts.windows(2) {
            if w[1] % w[0] != 0 {
                return bad(format!("B[i]={} does not divide B[i+1]={}", w[0], w[1]));
            }
        }
        if let Some(l) = self.level_lengths.iter().find(|&&l| l % self.block_size != 0) {
            return bad(format!("L entry {l} is not a multiple of block_size {}", self.block_size));
        }
        if self.kv_len_per_query() == 0 {
            return bad("every query needs a non-empty KV cache".into());
        }
        let h = &self.heads;
        if h.kv == 0 || h.q == 0 || !h.q.is_multiple_of(h.kv) {
            return bad(format!("query heads {} must be a positive multiple of kv heads {}", h.q, h.kv));
        }
        if h.dim == 0 {
            return bad("head dim must be positive".into());
        }
        if self.dtype_bytes.kv == 0 || self.dtype_bytes.intermediate == 0 {
            return bad("dtype sizes must be positive".into());
        }
        Ok(())
    }
}

/// Per-query ordered lists of KV block IDs.
///
/// Every block is full except possibly the last block of a row, whose filled
/// token count is given by `valid_tokens_last_block`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTable {
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    pub rows: Vec<Vec<BlockId>>,
    pub valid_tokens_last_block: Vec<usize>,
}

fn default_block_size() -> usize {
    16
}

impl BlockTable {
    /// Builds a table whose rows all end in a full block.
    pub fn from_rows(block_size: usize, rows: Vec<Vec<BlockId>>) -> Self {
        let valid = vec![block_size; rows.len()];
        BlockTable { block_size, rows, valid_tokens_last_block: valid }
    }

    pub fn num_queries(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn kv_len(&self, query: QueryId) -> usize {
        let row = &self.rows[query];
        match row.len() {
            0 => 0,
            n => (n - 1) * self.block_size + self.valid_tokens_last_block[query],
        }
    }

    /// Checks the structural invariants: one valid-token count per row, no
    /// empty rows, unique IDs within a row, and a consistent identity for
    /// every block (same predecessor and same token count wherever it
    /// appears), so that shared blocks only ever occur as shared prefixes.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTable(msg));
        if self.block_size == 0 {
            return bad("block_size must be positive".into());
        }
        if self.rows.len() != self.valid_tokens_last_block.len() {
            return bad(format!(
                "{} rows but {} valid-token entries",
                self.rows.len(),
                self.valid_tokens_last_block.len()
            ));
        }
        let mut seen: HashMap<BlockId, (Option<BlockId>, usize)> = HashMap::new();
        for (qi, row) in self.rows.iter().enumerate() {
            if row.is_empty() {
                return bad(format!("row {qi} is empty"));
            }
            let valid = self.valid_tokens_last_block[qi];
            if valid == 0 || valid > self.block_size {
                return bad(format!("row {qi}: valid tokens {valid} outside 1..={}", self.block_size));
            }
            let mut in_row = std::collections::HashSet::with_capacity(row.len());
            for (pos, &id) in row.iter().enumerate() {
                if !in_row.insert(id) {
                    return bad(format!("row {qi}: block {id} repeated"));
                }
                let pred = if pos == 0 { None } else { Some(row[pos - 1]) };
                let tokens = if pos + 1 == row.len() { valid } else { self.block_size };
                match seen.get(&id) {
                    None => {
                        seen.insert(id, (pred, tokens));
                    }
                    Some(&(p, t)) => {
                        if p != pred {
                            return bad(format!("block {id} appears after different predecessors"));
                        }
                        if t != tokens {
                            return bad(format!("block {id} has inconsistent token counts ({t} vs {tokens})"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Token count of every distinct block.
    pub fn block_tokens(&self) -> HashMap<BlockId, usize> {
        let mut map = HashMap::new();
        for (qi, row) in self.rows.iter().enumerate() {
            for (pos, &id) in row.iter().enumerate() {
                let t = if pos + 1 == row.len() { self.valid_tokens_last_block[qi] } else { self.block_size };
                map.entry(id).or_insert(t);
            }
        }
        map
    }

    pub fn distinct_blocks(&self) -> usize {
        self.block_tokens().len()
    }

    pub fn distinct_tokens(&self) -> usize {
        self.block_tokens().values().sum()
    }

    /// Order-sensitive content hash (hex SHA-256) over block size, rows and
    /// valid-token counts.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.block_size as u64).to_le_bytes());
        h.update((self.rows.len() as u64).to_le_bytes());
        for (row, valid) in self.rows.iter().zip(&self.valid_tokens_last_block) {
            h.update((row.len() as u64).to_le_bytes());
            for id in row {
                h.update(id.to_le_bytes());
            }
            h.update((*valid as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Expands a `(B, L)` spec into a block table.
///
/// Row `r` descends from node `r / (B_last / B_i)` at level `i`, so queries
/// below the same level-`i` ancestor share that ancestor's blocks and every
/// level above it. Blocks are created level by level, node by node; their IDs
/// are a seeded permutation of `0..total_blocks`.
pub fn generate_workload(spec: &WorkloadSpec, seed: u64) -> Result<BlockTable> {
    spec.validate()?;
    let bs = spec.block_size;
    let leaves = spec.batch_size();

    let total: usize = spec
        .level_counts
        .iter()
        .zip(&spec.level_lengths)
        .map(|(&b, &l)| b * (l / bs))
        .sum();
    if total > BlockId::MAX as usize {
        return Err(Error::InvalidSpec(format!("{total} blocks exceed the block id space")));
    }
    let mut ids: Vec<BlockId> = (0..total as BlockId).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    // level -> node -> blocks
    let mut next = 0usize;
    let mut levels: Vec<Vec<&[BlockId]>> = Vec::with_capacity(spec.level_counts.len());
    for (&count, &len) in spec.level_counts.iter().zip(&spec.level_lengths) {
        let per_node = len / bs;
        let nodes = (0..count)
            .map(|_| {
                let run = &ids[next..next + per_node];
                next += per_node;
                run
            })
            .collect();
        levels.push(nodes);
    }

    let rows = (0..leaves)
        .map(|r| {
            let mut row = Vec::with_capacity(spec.kv_len_per_query() / bs);
            for (lvl, &count) in spec.level_counts.iter().enumerate() {
                row.extend_from_slice(levels[lvl][r / (leaves / count)]);
            }
            row
        })
        .collect();
    Ok(BlockTable::from_rows(bs, rows))
}
