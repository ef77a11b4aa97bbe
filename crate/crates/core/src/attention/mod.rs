//! Double-precision reference attention and the partial/merge pipeline.
//!
//! Shapes: queries are `[queries x heads x d]`; KV rows are
//! `[tokens x kv_heads x d]`. Query head `h` reads KV head `h / (heads /
//! kv_heads)`.

mod dump;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dump::{read_dump, write_dump};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::partition::check_spans;
use crate::workload::{BlockId, BlockTable, HeadConfig, QueryId};

/// Dense row-major 3-d tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Tensor3 { dims, data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::ShapeMismatch(format!("{} values for shape {dims:?}", data.len())));
        }
        Ok(Tensor3 { dims, data })
    }

    /// Uniform values in `[-1, 1)`.
    pub fn random(dims: [usize; 3], rng: &mut impl Rng) -> Self {
        let data = (0..dims[0] * dims[1] * dims[2]).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor3 { dims, data }
    }

    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dims[2];
        let at = (i * self.dims[1] + j) * d;
        &self.data[at..at + d]
    }

    pub fn row_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let d = self.dims[2];
        let at = (i * self.dims[1] + j) * d;
        &mut self.data[at..at + d]
    }
}

/// K and V rows of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    pub k: Tensor3,
    pub v: Tensor3,
}

/// Paged KV storage keyed by block id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvBlockStore {
    pub blocks: HashMap<BlockId, KvBlock>,
}

impl KvBlockStore {
    /// Random K/V for every distinct block of `table`, sized by its valid
    /// tokens.
    pub fn random(table: &BlockTable, heads: HeadConfig, seed: u64) -> Self {
        let mut ids: Vec<(BlockId, usize)> = table.block_tokens().into_iter().collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = ids
            .into_iter()
            .map(|(id, tokens)| {
                let dims = [tokens, heads.kv, heads.dim];
                (id, KvBlock { k: Tensor3::random(dims, &mut rng), v: Tensor3::random(dims, &mut rng) })
            })
            .collect();
        KvBlockStore { blocks }
    }

    /// Concatenated K and V over a block run.
    pub fn gather(&self, blocks: &[BlockId]) -> Result<(Tensor3, Tensor3)> {
        let first = self.blocks.get(blocks.first().ok_or(Error::EmptySpan)?).ok_or(Error::UnknownBlock(blocks[0]))?;
        let [_, kvh, d] = first.k.dims;
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut tokens = 0;
        for id in blocks {
            let b = self.blocks.get(id).ok_or(Error::UnknownBlock(*id))?;
            if b.k.dims[1..] != [kvh, d] {
                return Err(Error::ShapeMismatch(format!("block {id} has shape {:?}", b.k.dims)));
            }
            k.extend_from_slice(&b.k.data);
            v.extend_from_slice(&b.v.data);
            tokens += b.k.dims[0];
        }
        Ok((Tensor3 { dims: [tokens, kvh, d], data: k }, Tensor3 { dims: [tokens, kvh, d], data: v }))
    }
}

/// Online-softmax state for one `(query, head)` over part of its KV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialResult {
    /// Largest scaled score seen.
    pub max_score: f64,
    /// `sum exp(score - max_score)`.
    pub lse_acc: f64,
    /// `sum exp(score - max_score) * v`.
    pub weighted_sum: Vec<f64>,
}

impl PartialResult {
    /// Rounds every component through `f32`, emulating 4-byte intermediates.
    pub fn to_f32_precision(&self) -> Self {
        PartialResult {
            max_score: self.max_score as f32 as f64,
            lse_acc: self.lse_acc as f32 as f64,
            weighted_sum: self.weighted_sum.iter().map(|&x| x as f32 as f64).collect(),
        }
    }

    pub fn finalize(&self) -> Result<Vec<f64>> {
        if self.lse_acc.is_nan() || self.lse_acc <= 0.0 {
            return Err(Error::NonPositiveDenominator(self.lse_acc));
        }
        Ok(self.weighted_sum.iter().map(|x| x / self.lse_acc).collect())
    }
}

/// Storage precision of partial results between the forward and merge
/// stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

fn check_heads(heads: &HeadConfig) -> Result<()> {
    if heads.kv == 0 || !heads.q.is_multiple_of(heads.kv) || heads.dim == 0 {
        return Err(Error::ShapeMismatch(format!("bad head configuration {heads:?}")));
    }
    Ok(())
}

fn check_q(q: &Tensor3, heads: &HeadConfig) -> Result<()> {
    if q.dims[1] != heads.q || q.dims[2] != heads.dim {
        return Err(Error::ShapeMismatch(format!("queries {:?} vs heads {}x{}", q.dims, heads.q, heads.dim)));
    }
    Ok(())
}

fn check_kv(k: &Tensor3, v: &Tensor3, heads: &HeadConfig) -> Result<()> {
    if k.dims != v.dims || k.dims[1] != heads.kv || k.dims[2] != heads.dim {
        return Err(Error::ShapeMismatch(format!("K {:?} / V {:?} vs kv heads {}", k.dims, v.dims, heads.kv)));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn default_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// Softmax attention of every query over its own K/V, in two passes (max,
/// then normalized weights).
pub fn full_attention(q: &Tensor3, k: &[Tensor3], v: &[Tensor3], heads: HeadConfig) -> Result<Tensor3> {
    check_heads(&heads)?;
    check_q(q, &heads)?;
    if k.len() != q.dims[0] || v.len() != q.dims[0] {
        return Err(Error::ShapeMismatch(format!("{} queries but {} K / {} V tensors", q.dims[0], k.len(), v.len())));
    }
    let scale = default_scale(heads.dim);
    let g = heads.group_size();
    let mut out = Tensor3::zeros(q.dims);
    for i in 0..q.dims[0] {
        check_kv(&k[i], &v[i], &heads)?;
        let len = k[i].dims[0];
        if len == 0 {
            return Err(Error::EmptySpan);
        }
        for h in 0..heads.q {
            let kh = h / g;
            let qr = q.row(i, h);
            let scores: Vec<f64> = (0..len).map(|t| scale * dot(qr, k[i].row(t, kh))).collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let denom: f64 = weights.iter().sum();
            let o = out.row_mut(i, h);
            for (t, w) in weights.iter().enumerate() {
                let p = w / denom;
                for (o, x) in o.iter_mut().zip(v[i].row(t, kh)) {
                    *o += p * x;
                }
            }
        }
    }
    Ok(out)
}

/// Partials of `q` (`[pack queries x heads x d]`) over one KV span, indexed
/// `[query * heads + head]`.
pub fn cta_partial(q: &Tensor3, k: &Tensor3, v: &Tensor3, heads: HeadConfig, scale: f64) -> Result<Vec<PartialResult>> {
    check_heads(&heads)?;
    check_q(q, &heads)?;
    check_kv(k, v, &heads)?;
    let len = k.dims[0];
    if len == 0 {
        return Err(Error::EmptySpan);
    }
    let g = heads.group_size();
    let mut out = Vec::with_capacity(q.dims[0] * heads.q);
    let mut scores = vec![0.0; len];
    for i in 0..q.dims[0] {
        for h in 0..heads.q {
            let kh = h / g;
            let qr = q.row(i, h);
            for (t, s) in scores.iter_mut().enumerate() {
                *s = scale * dot(qr, k.row(t, kh));
            }
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut acc = vec![0.0; heads.dim];
            let mut sum = 0.0;
            for (t, s) in scores.iter().enumerate() {
                let w = (s - mx).exp();
                sum += w;
                for (a, x) in acc.iter_mut().zip(v.row(t, kh)) {
                    *a += w * x;
                }
            }
            out.push(PartialResult { max_score: mx, lse_acc: sum, weighted_sum: acc });
        }
    }
    Ok(out)
}

/// Merges two partials of the same `(query, head)` without normalizing.
pub fn combine(a: &PartialResult, b: &PartialResult) -> PartialResult {
    let mx = a.max_score.max(b.max_score);
    let (wa, wb) = ((a.max_score - mx).exp(), (b.max_score - mx).exp());
    PartialResult {
        max_score: mx,
        lse_acc: a.lse_acc * wa + b.lse_acc * wb,
        weighted_sum: a.weighted_sum.iter().zip(&b.weighted_sum).map(|(x, y)| x * wa + y * wb).collect(),
    }
}

/// Rescales every partial to the global max and normalizes.
pub fn merge_partials(parts: &[PartialResult]) -> Result<Vec<f64>> {
    let first = parts.first().ok_or(Error::EmptyList)?;
    let d = first.weighted_sum.len();
    if parts.iter().any(|p| p.weighted_sum.len() != d) {
        return Err(Error::ShapeMismatch("partials of different head dims".into()));
    }
    let mx = parts.iter().map(|p| p.max_score).fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    let mut acc = vec![0.0; d];
    for p in parts {
        let w = (p.max_score - mx).exp();
        denom += p.lse_acc * w;
        for (a, x) in acc.iter_mut().zip(&p.weighted_sum) {
            *a += x * w;
        }
    }
    if denom.is_nan() || denom <= 0.0 || denom.is_infinite() {
        return Err(Error::NonPositiveDenominator(denom));
    }
    Ok(acc.into_iter().map(|x| x / denom).collect())
}

/// One forward unit: queries attending to a run of blocks.
pub type Unit<'a> = (&'a [QueryId], &'a [BlockId]);

/// Forward every unit, then merge per query and head. `q` holds one row per
/// table query.
pub fn run_packed_attention(
    table: &BlockTable,
    units: &[Unit<'_>],
    store: &KvBlockStore,
    q: &Tensor3,
    heads: HeadConfig,
    precision: Precision,
    exec: Execution,
) -> Result<Tensor3> {
    check_heads(&heads)?;
    check_q(q, &heads)?;
    if q.dims[0] != table.num_queries() {
        return Err(Error::ShapeMismatch(format!("{} query rows for {} table rows", q.dims[0], table.num_queries())));
    }
    check_spans(table, units.iter().copied())?;
    let scale = default_scale(heads.dim);
    let hd = heads.q * heads.dim;

    let partials = par::try_map(exec, units, |&(queries, blocks)| -> Result<Vec<PartialResult>> {
        let (k, v) = store.gather(blocks)?;
        let mut qp = Tensor3::zeros([queries.len(), heads.q, heads.dim]);
        for (i, &qi) in queries.iter().enumerate() {
            qp.data[i * hd..(i + 1) * hd].copy_from_slice(&q.data[qi * hd..(qi + 1) * hd]);
        }
        let parts = cta_partial(&qp, &k, &v, heads, scale)?;
        Ok(match precision {
            Precision::F64 => parts,
            Precision::F32 => parts.iter().map(PartialResult::to_f32_precision).collect(),
        })
    })?;

    let mut per_query: Vec<Vec<(usize, usize)>> = vec![Vec::new(); table.num_queries()];
    for (u, &(queries, _)) in units.iter().enumerate() {
        for (i, &qi) in queries.iter().enumerate() {
            per_query[qi].push((u, i));
        }
    }
    let rows = par::try_map(exec, &per_query, |sources| -> Result<Vec<f64>> {
        let mut row = Vec::with_capacity(hd);
        for h in 0..heads.q {
            let parts: Vec<PartialResult> =
                sources.iter().map(|&(u, i)| partials[u][i * heads.q + h].clone()).collect();
            row.extend(merge_partials(&parts)?);
        }
        Ok(row)
    })?;
    Tensor3::from_vec(q.dims, rows.concat())
}

/// Full attention for every table query, gathering its row from the store.
pub fn reference_output(table: &BlockTable, store: &KvBlockStore, q: &Tensor3, heads: HeadConfig) -> Result<Tensor3> {
    let mut ks = Vec::with_capacity(table.num_queries());
    let mut vs = Vec::with_capacity(table.num_queries());
    for row in &table.rows {
        let (k, v) = store.gather(row)?;
        ks.push(k);
        vs.push(v);
    }
    full_attention(q, &ks, &vs, heads)
}

/// Largest per-`(query, head)` relative error `|a - b| / |b|` (Euclidean).
pub fn max_relative_error(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    let mut worst: f64 = 0.0;
    for i in 0..a.dims[0] {
        for h in 0..a.dims[1] {
            let (x, y) = (a.row(i, h), b.row(i, h));
            let diff = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let norm = y.iter().map(|q| q * q).sum::<f64>().sqrt();
            let rel = if norm > 0.0 { diff / norm } else { diff };
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

pub fn random_queries(num_queries: usize, heads: HeadConfig, seed: u64) -> Tensor3 {
    Tensor3::random([num_queries, heads.q, heads.dim], &mut ChaCha8Rng::seed_from_u64(seed))
}
