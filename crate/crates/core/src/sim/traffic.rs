//! Global-memory traffic accounting.
//!
//! Two views are kept:
//! - [`TrafficReport`] counts bytes for the whole model: K and V for every KV
//!   head, and per-query partials of `(d + 2)` elements (weighted sum, max,
//!   log-sum-exp) for every query head.
//! - [`ModeledTraffic`] counts in the packer's profit-model units: one
//!   `d`-vector per KV token and a `d`-vector write plus read per partial,
//!   each weighted by its dtype size.
//!
//! In both, a query that appears in a single unit needs no partials at all.

use serde::{Deserialize, Serialize};

use crate::partition::{pack_multiplicity, Partition};
use crate::workload::{BlockTable, QueryId, WorkloadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrafficReport {
    pub kv_bytes: u64,
    pub intermediate_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModeledTraffic {
    pub kv: u64,
    pub intermediate: u64,
    pub total: u64,
}

/// K and V bytes per token across all KV heads.
pub fn kv_bytes_per_token(spec: &WorkloadSpec) -> u64 {
    (spec.heads.dim * spec.dtype_bytes.kv * 2 * spec.heads.kv) as u64
}

/// Write plus merge-read of one query's partial across all query heads.
pub fn partial_bytes(spec: &WorkloadSpec) -> u64 {
    (2 * (spec.heads.dim + 2) * spec.dtype_bytes.intermediate * spec.heads.q) as u64
}

/// Accounts `(queries, kv_len)` units, e.g. partition packs or CTA tasks.
pub fn account_units<'a, I>(units: I, spec: &WorkloadSpec) -> TrafficReport
where
    I: IntoIterator<Item = (&'a [QueryId], usize)> + Clone,
{
    let kv_tokens: u64 = units.clone().into_iter().map(|(_, kv)| kv as u64).sum();
    let partials = partial_count(units.into_iter().map(|(q, _)| q));
    let kv_bytes = kv_tokens * kv_bytes_per_token(spec);
    let intermediate_bytes = partials * partial_bytes(spec);
    TrafficReport { kv_bytes, intermediate_bytes, total_bytes: kv_bytes + intermediate_bytes }
}

pub fn account_traffic(partition: &Partition, spec: &WorkloadSpec) -> TrafficReport {
    account_units(partition.packs.iter().map(|p| (p.query_ids.as_slice(), p.kv_len)), spec)
}

pub fn modeled_units<'a, I>(units: I, spec: &WorkloadSpec) -> ModeledTraffic
where
    I: IntoIterator<Item = (&'a [QueryId], usize)> + Clone,
{
    let d = spec.heads.dim as u64;
    let kv_tokens: u64 = units.clone().into_iter().map(|(_, kv)| kv as u64).sum();
    let partials = partial_count(units.into_iter().map(|(q, _)| q));
    let kv = kv_tokens * d * spec.dtype_bytes.kv as u64;
    let intermediate = partials * 2 * d * spec.dtype_bytes.intermediate as u64;
    ModeledTraffic { kv, intermediate, total: kv + intermediate }
}

pub fn modeled_traffic(partition: &Partition, spec: &WorkloadSpec) -> ModeledTraffic {
    modeled_units(partition.packs.iter().map(|p| (p.query_ids.as_slice(), p.kv_len)), spec)
}

/// Number of `(query, unit)` incidences whose query spans several units.
fn partial_count<'a, I>(queries: I) -> u64
where
    I: IntoIterator<Item = &'a [QueryId]>,
{
    pack_multiplicity(queries).values().filter(|&&c| c > 1).map(|&c| c as u64).sum()
}

/// Every distinct KV block loaded exactly once.
pub fn theoretical_minimum(table: &BlockTable, spec: &WorkloadSpec) -> u64 {
    table.distinct_tokens() as u64 * kv_bytes_per_token(spec)
}

/// Same lower bound in profit-model units.
pub fn modeled_minimum(table: &BlockTable, spec: &WorkloadSpec) -> u64 {
    table.distinct_tokens() as u64 * (spec.heads.dim * spec.dtype_bytes.kv) as u64
}
